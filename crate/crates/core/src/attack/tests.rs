use super::*;
use crate::autodiff::Tape;
use crate::rng::RngState;
use crate::scene::{io, render_tile, Catalog, GridLayout};
use crate::vlm::{tok, AttentionRecord, Model, ModelConfig, VisionTokenMap};

fn synthetic_record(
    tape: &mut Tape,
    rows: Vec<Vec<f32>>, // per (layer,head) flattened row-major (n_rows x n_keys)
    shape: (usize, usize, usize, usize), // layers, heads, n_rows, n_keys
    vision: Vec<usize>,
    patch: Vec<usize>,
    output_rows: Vec<usize>,
) -> AttentionRecord {
    let (layers, heads, n_rows, n_keys) = shape;
    let mut alphas = Vec::new();
    let mut it = rows.into_iter();
    for _ in 0..layers {
        let mut per_head = Vec::new();
        for _ in 0..heads {
            let data = it.next().expect("matrix per (layer, head)");
            per_head.push(tape.constant(data, &[n_rows, n_keys]).unwrap());
        }
        alphas.push(per_head);
    }
    AttentionRecord {
        alphas,
        row_offset: 0,
        n_keys,
        vision_map: VisionTokenMap {
            rows: 1,
            cols: vision.len(),
            grid: vision.clone(),
            patch_set: patch,
            vision_set: vision,
        },
        output_rows,
    }
}

#[test]
fn attention_mass_sums_the_selected_columns() {
    let mut tape = Tape::new();
    let rec = synthetic_record(
        &mut tape,
        vec![vec![0.1, 0.2, 0.3, 0.4]],
        (1, 1, 1, 4),
        vec![0, 1, 2, 3],
        vec![0, 1],
        vec![0],
    );
    let m = attention_mass(&tape, &rec, 0, 0, 0, &[0, 1]).unwrap();
    assert!((m - 0.3).abs() < 1e-7);
}

#[test]
fn attention_mass_of_uniform_row() {
    let mut tape = Tape::new();
    let rec = synthetic_record(
        &mut tape,
        vec![vec![0.125; 8]],
        (1, 1, 1, 8),
        (0..8).collect(),
        vec![0, 1],
        vec![0],
    );
    let m = attention_mass(&tape, &rec, 0, 0, 0, &[3, 6]).unwrap();
    assert!((m - 0.25).abs() < 1e-7);
}

#[test]
fn attention_mass_is_additive_over_disjoint_sets() {
    let mut rng = RngState::new(3, "mass-additivity");
    for _ in 0..50 {
        let n_keys = 6 + rng.below(10);
        let row: Vec<f32> = (0..n_keys).map(|_| rng.next_f32()).collect();
        let mut tape = Tape::new();
        let vision: Vec<usize> = (0..n_keys).collect();
        let split = 1 + rng.below(n_keys - 1);
        let (p, rest): (Vec<usize>, Vec<usize>) =
            (vision[..split].to_vec(), vision[split..].to_vec());
        let rec = synthetic_record(
            &mut tape,
            vec![row],
            (1, 1, 1, n_keys),
            vision.clone(),
            p.clone(),
            vec![0],
        );
        let mp = attention_mass(&tape, &rec, 0, 0, 0, &p).unwrap();
        let mr = attention_mass(&tape, &rec, 0, 0, 0, &rest).unwrap();
        let mv = attention_mass(&tape, &rec, 0, 0, 0, &vision).unwrap();
        assert!((mp + mr - mv).abs() < 1e-5);
    }
}

#[test]
fn attention_mass_rejects_out_of_range_indices() {
    let mut tape = Tape::new();
    let rec = synthetic_record(
        &mut tape,
        vec![vec![0.5, 0.5]],
        (1, 1, 1, 2),
        vec![0, 1],
        vec![0],
        vec![0],
    );
    assert!(matches!(
        attention_mass(&tape, &rec, 2, 0, 0, &[0]),
        Err(AttackError::IndexOutOfRange(_))
    ));
    assert!(matches!(
        attention_mass(&tape, &rec, 0, 0, 0, &[7]),
        Err(AttackError::IndexOutOfRange(_))
    ));
}

#[test]
fn timg_boundary_meets_threshold_with_one_token() {
    let (t, fb) = select_tokens_timg(&[0.5, 0.3, 0.2], 0.5, false);
    assert_eq!(t, vec![0]);
    assert!(!fb);
}

#[test]
fn timg_takes_two_tokens_when_one_falls_short() {
    let (t, _) = select_tokens_timg(&[0.4, 0.35, 0.25], 0.5, false);
    assert_eq!(t, vec![0, 1]);
}

#[test]
fn timg_flag_returns_the_full_reference() {
    let (t, _) = select_tokens_timg(&[0.4, 0.35, 0.25], 0.5, true);
    assert_eq!(t, vec![0, 1, 2]);
}

#[test]
fn timg_all_zero_mass_falls_back_with_warning() {
    let (t, fb) = select_tokens_timg(&[0.0, 0.0], 0.5, false);
    assert_eq!(t, vec![0, 1]);
    assert!(fb);
}

/// Brute-force smallest qualifying prefix over 1000 random mass vectors.
#[test]
fn timg_matches_brute_force_enumeration() {
    let mut rng = RngState::new(41, "timg-oracle");
    for trial in 0..1000 {
        let n = 1 + rng.below(8);
        let psi: Vec<f32> = (0..n).map(|_| rng.next_f32()).collect();
        let p = rng.next_f32().clamp(0.05, 1.0);
        let (got, _) = select_tokens_timg(&psi, p, false);

        // oracle: sort descending (ties by index), scan prefixes
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| psi[b].partial_cmp(&psi[a]).unwrap().then(a.cmp(&b)));
        let total: f64 = psi.iter().map(|&v| v as f64).sum();
        let threshold = p as f64 * total * (1.0 - 1e-6);
        let mut want = Vec::new();
        let mut cum = 0.0f64;
        for &i in &order {
            want.push(i);
            cum += psi[i] as f64;
            if cum >= threshold {
                break;
            }
        }
        want.sort_unstable();
        assert_eq!(got, want, "trial {trial}: psi {psi:?} p {p}");
    }
}

#[test]
fn head_selection_uses_strict_inequality() {
    // three heads with T_img visual masses 0.06 / 0.04 / 0.05 at the 0.05
    // threshold: only the first survives
    let mut tape = Tape::new();
    let rec = synthetic_record(
        &mut tape,
        vec![
            vec![0.03, 0.03], // head 0: sums to 0.06
            vec![0.02, 0.02], // head 1: 0.04
            vec![0.03, 0.02], // head 2: 0.05 exactly -> dropped
        ],
        (1, 3, 1, 2),
        vec![0, 1],
        vec![0],
        vec![0],
    );
    let s = select_active_heads(&tape, &rec, &[0], 0.05, false, false).unwrap();
    assert_eq!(s.pairs, vec![(0, 0)]);
    assert!(!s.fallback);
}

#[test]
fn zero_threshold_keeps_every_positive_head() {
    let mut tape = Tape::new();
    let rec = synthetic_record(
        &mut tape,
        vec![vec![0.2, 0.1], vec![0.05, 0.01]],
        (1, 2, 1, 2),
        vec![0, 1],
        vec![0],
        vec![0],
    );
    let s = select_active_heads(&tape, &rec, &[0], 0.0, false, false).unwrap();
    assert_eq!(s.pairs.len(), 2);
}

#[test]
fn head_selection_matches_resummation_oracle() {
    let mut rng = RngState::new(9, "head-oracle");
    for _ in 0..200 {
        let layers = 1 + rng.below(3);
        let heads = 1 + rng.below(4);
        let n_rows = 1 + rng.below(3);
        let n_keys = 4 + rng.below(6);
        let mut tape = Tape::new();
        let mats: Vec<Vec<f32>> = (0..layers * heads)
            .map(|_| (0..n_rows * n_keys).map(|_| rng.next_f32() * 0.2).collect())
            .collect();
        let vision: Vec<usize> = (0..n_keys).collect();
        let rec = synthetic_record(
            &mut tape,
            mats.clone(),
            (layers, heads, n_rows, n_keys),
            vision,
            vec![0],
            (0..n_rows).collect(),
        );
        let rows: Vec<usize> = (0..n_rows).collect();
        let alpha_act = rng.next_f32() * 0.3;
        let s = select_active_heads(&tape, &rec, &rows, alpha_act, false, false).unwrap();

        let mut want = Vec::new();
        for l in 0..layers {
            for h in 0..heads {
                let m = &mats[l * heads + h];
                let mut sum = 0.0f32;
                for r in 0..n_rows {
                    for k in 0..n_keys {
                        sum += m[r * n_keys + k];
                    }
                }
                if sum > alpha_act {
                    want.push((l, h));
                }
            }
        }
        if want.is_empty() {
            assert!(s.fallback);
        } else {
            assert_eq!(s.pairs, want);
        }
    }
}

#[test]
fn second_last_layer_mode_takes_all_its_heads() {
    let mut tape = Tape::new();
    let layers = 4;
    let heads = 2;
    let mats: Vec<Vec<f32>> = (0..layers * heads).map(|_| vec![0.5, 0.5]).collect();
    let rec = synthetic_record(
        &mut tape,
        mats,
        (layers, heads, 1, 2),
        vec![0, 1],
        vec![0],
        vec![0],
    );
    let s = select_active_heads(&tape, &rec, &[0], 0.05, false, true).unwrap();
    assert_eq!(s.pairs, vec![(2, 0), (2, 1)]);
}

#[test]
fn adv_loss_single_term_is_log_ratio() {
    let mut tape = Tape::new();
    // Psi(t,P) = 0.2, Psi(t,V) = 0.4
    let rec = synthetic_record(
        &mut tape,
        vec![vec![0.1, 0.1, 0.1, 0.1]],
        (1, 1, 1, 4),
        vec![0, 1, 2, 3],
        vec![0, 1],
        vec![0],
    );
    let heads = HeadSelection {
        pairs: vec![(0, 0)],
        fallback: false,
    };
    let loss = adv_loss(&mut tape, &rec, &[0], &heads, 1e-12).unwrap();
    assert!((tape.value(loss) - 0.5f32.ln()).abs() < 1e-6);
}

#[test]
fn adv_loss_tops_out_at_zero_when_patch_owns_all_attention() {
    let mut tape = Tape::new();
    let rec = synthetic_record(
        &mut tape,
        vec![vec![0.3, 0.3, 0.0, 0.0]],
        (1, 1, 1, 4),
        vec![0, 1, 2, 3],
        vec![0, 1],
        vec![0],
    );
    let heads = HeadSelection {
        pairs: vec![(0, 0)],
        fallback: false,
    };
    let loss = adv_loss(&mut tape, &rec, &[0], &heads, 1e-12).unwrap();
    assert!(tape.value(loss).abs() < 1e-6);
}

#[test]
fn adv_loss_matches_straight_line_oracle() {
    let mut rng = RngState::new(13, "advloss-oracle");
    for _ in 0..100 {
        let layers = 1 + rng.below(3);
        let heads_n = 1 + rng.below(3);
        let n_rows = 1 + rng.below(3);
        let n_keys = 6 + rng.below(6);
        let mut tape = Tape::new();
        let mats: Vec<Vec<f32>> = (0..layers * heads_n)
            .map(|_| (0..n_rows * n_keys).map(|_| 0.01 + rng.next_f32() * 0.1).collect())
            .collect();
        let vision: Vec<usize> = (0..n_keys).collect();
        let patch: Vec<usize> = (0..n_keys / 2).collect();
        let rec = synthetic_record(
            &mut tape,
            mats,
            (layers, heads_n, n_rows, n_keys),
            vision,
            patch,
            (0..n_rows).collect(),
        );
        let rows: Vec<usize> = (0..n_rows).collect();
        let hs = HeadSelection {
            pairs: (0..layers)
                .flat_map(|l| (0..heads_n).map(move |h| (l, h)))
                .collect(),
            fallback: false,
        };
        let node = adv_loss(&mut tape, &rec, &rows, &hs, 1e-12).unwrap();
        let reference = adv_loss_reference(&tape, &rec, &rows, &hs, 1e-12).unwrap();
        assert!(
            (tape.value(node) as f64 - reference).abs() < 1e-6,
            "{} vs {reference}",
            tape.value(node)
        );
    }
}

#[test]
fn ce_loss_is_zero_at_probability_one() {
    let mut tape = Tape::new();
    let vocab = 20usize;
    let t_ref = [tok::SEL, 12u32];
    // +100 logit on each target: softmax probability is 1 up to f32
    let mut logits = vec![0.0f32; (1 + t_ref.len()) * vocab];
    logits[tok::SEL as usize] = 100.0;
    logits[vocab + 12] = 100.0;
    let logits_id = tape.constant(logits, &[3, vocab]).unwrap();
    let out = crate::vlm::ForwardOutput {
        logits: logits_id,
        record: None,
        vision_map: VisionTokenMap {
            rows: 0,
            cols: 0,
            grid: vec![],
            patch_set: vec![],
            vision_set: vec![],
        },
        output_rows: vec![1, 2],
        out_marker_row: 0,
        row_offset: 0,
        seq_len: 3,
    };
    let loss = ce_loss(&mut tape, &out, &t_ref).unwrap();
    assert!(tape.value(loss).abs() < 1e-6);
}

fn project_conflicts_for_tests(g: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let mut rng = RngState::new(0, "pc-test");
    super::pcgrad::project_conflicts(g, &mut rng)
}

#[test]
fn pcgrad_leaves_orthogonal_gradients_unchanged() {
    let g = vec![vec![1.0f32, 0.0], vec![0.0, 1.0]];
    let adjusted = project_conflicts_for_tests(&g);
    assert_eq!(adjusted, g);
    let mut rng = RngState::new(1, "pc");
    let mean = pcgrad(&g, false, &mut rng);
    assert_eq!(mean, vec![0.5, 0.5]);
}

#[test]
fn pcgrad_worked_example_is_exact() {
    // g1 = (1,0), g2 = (-1,1): g1 projects to exactly (0.5, 0.5), which is
    // orthogonal to g2
    let g = vec![vec![1.0f32, 0.0], vec![-1.0, 1.0]];
    let adjusted = project_conflicts_for_tests(&g);
    assert_eq!(adjusted[0], vec![0.5, 0.5]);
    assert_eq!(adjusted[0][0] * g[1][0] + adjusted[0][1] * g[1][1], 0.0);
}

#[test]
fn pcgrad_projected_pairs_no_longer_conflict() {
    let mut rng = RngState::new(77, "pc-pairs");
    let mut tested = 0;
    for trial in 0..200 {
        if tested >= 100 {
            break;
        }
        let dim = 2 + rng.below(16);
        // construct a genuinely conflicting pair
        let a: Vec<f32> = (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut b: Vec<f32> = a.iter().map(|&v| -v).collect();
        for v in &mut b {
            *v += rng.uniform(-0.2, 0.2);
        }
        let dot_raw: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        if dot_raw >= 0.0 {
            continue;
        }
        tested += 1;
        let adjusted = project_conflicts_for_tests(&[a.clone(), b.clone()]);
        let d0: f64 = adjusted[0].iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        let d1: f64 = adjusted[1].iter().zip(&a).map(|(&x, &y)| x as f64 * y as f64).sum();
        assert!(d0 >= -1e-6, "trial {trial}: d0 {d0}");
        assert!(d1 >= -1e-6, "trial {trial}: d1 {d1}");
    }
    assert!(tested >= 100, "only {tested} conflicting pairs");
}

#[test]
fn pcgrad_without_conflicts_equals_plain_mean_exactly() {
    let mut rng = RngState::new(5, "pc-mean");
    let g: Vec<Vec<f32>> = (0..4)
        .map(|_| (0..8).map(|_| rng.uniform(0.1, 1.0)).collect())
        .collect();
    // all-positive gradients cannot conflict
    let mut order_rng = RngState::new(6, "pc-order");
    let surgical = pcgrad(&g, false, &mut order_rng);
    let mut avg_rng = RngState::new(6, "pc-order");
    let plain = pcgrad(&g, true, &mut avg_rng);
    assert_eq!(surgical, plain);
}

#[test]
fn pcgrad_single_input_is_identity() {
    let g = vec![vec![0.3f32, -0.7, 0.1]];
    let mut rng = RngState::new(2, "pc-one");
    assert_eq!(pcgrad(&g, false, &mut rng), g[0]);
}

#[test]
fn apgd_step_clamps_to_the_epsilon_ball() {
    let eps = 8.0 / 255.0;
    let out = apgd_step(&[0.5], &[1.0], 0.1, &[0.5], eps);
    assert!((out[0] - (0.5 + eps)).abs() < 1e-7, "{}", out[0]);
    // and to [0,1]
    let hi = apgd_step(&[0.99], &[1.0], 0.5, &[0.99], 0.5);
    assert_eq!(hi[0], 1.0);
}

#[test]
fn zero_gradient_does_not_move() {
    let out = apgd_step(&[0.4], &[0.0], 0.1, &[0.4], 0.03);
    assert_eq!(out[0], 0.4);
}

#[test]
fn oscillation_check_halves_exactly_once_at_the_checkpoint() {
    // monotonically decreasing losses: zero successful steps in the first
    // window, so the first checkpoint halves eta exactly once
    let mut state = StepSizeState::new(0.1, 100);
    assert_eq!(state.checkpoints()[0], 22);
    for i in 0..22 {
        let halved = state.observe(i, -(i as f32));
        if i + 1 == 22 {
            assert!(halved);
        } else {
            assert!(!halved);
        }
    }
    assert_eq!(state.halvings, vec![21]);
    assert!((state.eta - 0.05).abs() < 1e-7);
}

#[test]
fn steadily_improving_losses_keep_the_step_size() {
    let mut state = StepSizeState::new(0.1, 100);
    for i in 0..100 {
        state.observe(i, i as f32);
    }
    assert!(state.halvings.is_empty());
    assert!((state.eta - 0.1).abs() < 1e-7);
}

#[test]
fn quantize_endpoints_and_rounding() {
    let q = quantize_patch(&[0.0, 1.0, 0.25]);
    assert_eq!(q.bytes, vec![0, 255, 64]); // 63.75 rounds up
    assert_eq!(q.reloaded[0], 0.0);
    assert_eq!(q.reloaded[1], 1.0);
}

#[test]
fn quantized_round_trip_stays_within_one_level_of_the_ball() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngState::new(30, "quant-ball");
    let eps = 8.0f32 / 255.0;
    for trial in 0..100 {
        let clean: Vec<f32> = (0..36 * 36 * 3).map(|_| rng.next_f32()).collect();
        let adv: Vec<f32> = clean
            .iter()
            .map(|&c| (c + rng.uniform(-eps, eps)).clamp(0.0, 1.0))
            .collect();
        let q = quantize_patch(&adv);
        // via the actual PNG round trip
        let path = dir.path().join(format!("p{trial}.png"));
        io::save_png(&path, &adv, 36, 36).unwrap();
        let (reloaded, _, _) = io::load_png(&path).unwrap();
        assert_eq!(reloaded, q.reloaded);
        let linf = clean
            .iter()
            .zip(reloaded.iter())
            .map(|(&c, &r)| (c - r).abs())
            .fold(0.0f32, f32::max);
        assert!(linf <= 9.0 / 255.0 + 1e-6, "trial {trial}: {linf}");
    }
}

#[test]
fn tracker_keeps_the_window_maximum() {
    let mut tr = CandidateTracker::new(100, 0.6);
    assert_eq!(tr.start_iter(), 60);
    tr.observe(60, -0.5, &[0.0], 1);
    tr.observe(61, -0.3, &[1.0], 1);
    tr.observe(62, -0.4, &[2.0], 1);
    tr.close_window();
    assert_eq!(tr.candidates.len(), 1);
    assert_eq!(tr.candidates[0].mean_loss, -0.3);
    assert_eq!(tr.candidates[0].iteration, 61);
}

#[test]
fn tracker_ignores_iterations_before_the_window_start() {
    let mut tr = CandidateTracker::new(100, 0.6);
    tr.observe(10, 5.0, &[0.0], 0);
    tr.close_window();
    assert!(tr.candidates.is_empty());
}

#[test]
fn tracker_window_count_matches_the_schedule() {
    // 2500 iterations, K = 50, start at 60%: at most 20 windows
    let mut tr = CandidateTracker::new(2500, 0.6);
    assert_eq!(tr.start_iter(), 1500);
    for i in 0..2500 {
        if i % 50 == 0 {
            tr.close_window();
        }
        tr.observe(i, -1.0 - (i as f32 * 1e-4), &[0.0], (i / 50) as u64);
    }
    tr.close_window();
    assert_eq!(tr.candidates.len(), 20);
    assert!(tr.candidates.iter().all(|c| c.iteration >= 1500));
}

#[test]
fn ablation_flag_parsing() {
    let mut flags = AblationFlags::default();
    flags.set("avg_grad").unwrap();
    flags.set("NO_TRAJECTORY").unwrap();
    assert!(flags.avg_grad && flags.no_trajectory);
    assert_eq!(flags.active(), vec!["avg_grad", "no_trajectory"]);
    match flags.set("bogus") {
        Err(AttackError::UnknownAblation { got, valid }) => {
            assert_eq!(got, "bogus");
            for name in [
                "avg_grad",
                "no_init",
                "no_head_active",
                "no_timg",
                "second_last_layer_only",
                "no_trajectory",
            ] {
                assert!(valid.contains(name));
            }
        }
        other => panic!("expected UnknownAblation, got {other:?}"),
    }
}

#[test]
fn config_validation_rejects_bad_ranges() {
    let mut c = AttackConfig::default();
    c.epsilon = 1.5;
    assert!(c.validate().is_err());
    let mut c = AttackConfig::default();
    c.p_img = 0.0;
    assert!(c.validate().is_err());
    let mut c = AttackConfig::default();
    c.n_iter_init = c.n_iter + 1;
    assert!(c.validate().is_err());
    assert!(AttackConfig::default().validate().is_ok());
}

// ---- small end-to-end runs on a tiny victim ---------------------------

fn tiny_setup() -> (Model, Catalog, GridLayout) {
    let catalog = Catalog::generate(7, 40, 2, 5).unwrap();
    let layout = GridLayout::default_five();
    let mut rng = RngState::new(100, "attack-test/model");
    let model = Model::init(ModelConfig::tiny(), &mut rng).unwrap();
    (model, catalog, layout)
}

fn small_config(seed: u64) -> AttackConfig {
    AttackConfig {
        n_iter: 40,
        n_iter_init: 10,
        swap_interval: 10,
        validation_grids: 2,
        seed,
        ..AttackConfig::default()
    }
}

#[test]
fn run_prac_obeys_the_schedule_and_budget() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[0];
    let config = small_config(1);
    let run = run_attack(&model, &catalog, &layout, target, &config, AttackMethod::Prac).unwrap();

    assert_eq!(run.log.swap_iterations, vec![0, 10, 20, 30]);
    assert_eq!(run.log.warm_steps, 10);
    let warm_records = run.log.records.iter().filter(|r| r.phase == Phase::Warm).count();
    let main_records = run.log.records.iter().filter(|r| r.phase == Phase::Main).count();
    assert_eq!(warm_records, 10);
    assert_eq!(main_records, 40);
    // candidate windows only from 60% of the budget
    assert!(!run.log.candidates.is_empty() && run.log.candidates.len() <= 2);
    assert!(run.log.candidates.iter().all(|c| c.iteration >= 24));
    assert!(run.log.chosen_iteration.is_some());
    assert_eq!(run.log.prefix_images, 1);

    // budget invariant after quantization
    let linf = run
        .final_patch
        .reloaded
        .iter()
        .zip(run.clean_patch.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(linf <= config.epsilon + 1.0 / 255.0 + 1e-6, "{linf}");

    // the attention ratio is logged for every main record
    assert!(run
        .log
        .records
        .iter()
        .filter(|r| r.phase == Phase::Main)
        .all(|r| r.ratio.is_some()));
}

#[test]
fn run_ce_shares_the_pipeline() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[1];
    let mut config = small_config(2);
    config.ablation.set("avg_grad").unwrap();
    let run = run_attack(&model, &catalog, &layout, target, &config, AttackMethod::Ce).unwrap();
    assert!(run.log.pcgrad_bypassed);
    assert_eq!(run.log.swap_iterations.len(), 4);
    assert!(run
        .log
        .records
        .iter()
        .filter(|r| r.phase == Phase::Main)
        .all(|r| r.ratio.is_none()));
    let linf = run
        .final_patch
        .reloaded
        .iter()
        .zip(run.clean_patch.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(linf <= config.epsilon + 1.0 / 255.0 + 1e-6);
}

#[test]
fn no_trajectory_ablation_runs_without_prior_images() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[2];
    let mut config = small_config(3);
    config.n_iter = 20;
    config.n_iter_init = 5;
    config.ablation.set("no_trajectory").unwrap();
    let run = run_attack(&model, &catalog, &layout, target, &config, AttackMethod::Prac).unwrap();
    assert_eq!(run.log.prefix_images, 0);
    assert_eq!(run.log.prefix_len, 4); // prompt tokens only
}

#[test]
fn no_init_skips_the_warm_start() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[0];
    let mut config = small_config(4);
    config.n_iter = 12;
    config.ablation.set("no_init").unwrap();
    let run = run_attack(&model, &catalog, &layout, target, &config, AttackMethod::Prac).unwrap();
    assert_eq!(run.log.warm_steps, 0);
    assert!(run.log.warm_position.is_none());
    assert!(run.log.records.iter().all(|r| r.phase == Phase::Main));
}

#[test]
fn identical_seeds_produce_identical_runs() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[3];
    let mut config = small_config(9);
    config.n_iter = 20;
    config.n_iter_init = 5;
    let a = run_attack(&model, &catalog, &layout, target, &config, AttackMethod::Prac).unwrap();
    let b = run_attack(&model, &catalog, &layout, target, &config, AttackMethod::Prac).unwrap();
    assert_eq!(a.final_patch.bytes, b.final_patch.bytes);
    assert_eq!(
        serde_json::to_string(&a.log).unwrap(),
        serde_json::to_string(&b.log).unwrap()
    );
}

#[test]
fn validation_prefers_higher_ssr_and_breaks_ties_late() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[0];
    let clean = render_tile(catalog.product(target).unwrap());
    // identical patches at different iterations: equal SSR, latest wins
    let candidates = vec![
        Candidate {
            patch: clean.clone(),
            mean_loss: -1.0,
            iteration: 1700,
            window: 1,
        },
        Candidate {
            patch: clean.clone(),
            mean_loss: -1.2,
            iteration: 2400,
            window: 2,
        },
    ];
    let query = crate::vlm::SelectionQuery {
        category_index: crate::scene::category_index(&catalog.product(target).unwrap().category)
            .unwrap(),
        format: crate::vlm::OutputFormat::Name,
        use_trajectory: false,
    };
    let mut rng = RngState::new(0, "val-grids");
    let grids = crate::scene::sample_validation_grids(&catalog, &layout, 2, &mut rng).unwrap();
    let (chosen, ssrs) =
        validate_candidates(&model, &catalog, &layout, target, &candidates, &grids, &query, 1)
            .unwrap();
    assert_eq!(ssrs[0], ssrs[1]);
    assert_eq!(chosen, 1, "ties must resolve to the later iteration");
}

#[test]
fn single_candidate_is_returned_unchanged() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[1];
    let clean = render_tile(catalog.product(target).unwrap());
    let candidates = vec![Candidate {
        patch: clean,
        mean_loss: -0.5,
        iteration: 100,
        window: 0,
    }];
    let query = crate::vlm::SelectionQuery {
        category_index: 0,
        format: crate::vlm::OutputFormat::Name,
        use_trajectory: false,
    };
    let mut rng = RngState::new(1, "val-grids");
    let grids = crate::scene::sample_validation_grids(&catalog, &layout, 2, &mut rng).unwrap();
    let (chosen, _) =
        validate_candidates(&model, &catalog, &layout, target, &candidates, &grids, &query, 1)
            .unwrap();
    assert_eq!(chosen, 0);
}

#[test]
fn run_log_round_trips_through_jsonl() {
    let (model, catalog, layout) = tiny_setup();
    let target = catalog.test_pool()[2];
    let mut config = small_config(5);
    config.n_iter = 10;
    config.n_iter_init = 2;
    config.swap_interval = 5;
    let run = run_attack(&model, &catalog, &layout, target, &config, AttackMethod::Prac).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    write_run_log(&path, &run.log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + run.log.records.len());
    let summary: RunLog = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(summary.target_id, target);
    let rec: LogRecord = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(rec.iteration, 0);
}
