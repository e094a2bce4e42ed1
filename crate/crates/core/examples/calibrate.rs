//! Scratch calibration driver (not part of the deliverable surface).

use crossrectify::metrics::AblationKind;
use crossrectify::rng::SeedStream;
use crossrectify::toylab::{
    corrupt_labels, generate_scenes, train_run, train_run_with, NoiseModel, SceneSpec,
    ToyDetectorParams, TrainConfig, TrainMode, TrainOptions, ToyScene,
};

fn splits(seed: u64, spec: &SceneSpec, n_lab: usize, n_unl: usize, n_test: usize)
    -> (Vec<ToyScene>, Vec<ToyScene>, Vec<ToyScene>)
{
    let all = generate_scenes(seed, n_lab + n_unl + n_test, spec);
    let labeled = all[..n_lab].to_vec();
    let unlabeled = all[n_lab..n_lab + n_unl].to_vec();
    let test = all[n_lab + n_unl..].to_vec();
    (labeled, unlabeled, test)
}

fn base_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        iterations: 4000,
        warmup_iterations: 2000,
        learning_rate: 0.1,
        ema_decay: 0.995,
        lambda_max: 1.0,
        batch_labeled: 24,
        batch_unlabeled: 32,
        ..TrainConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn table2(seeds: u64) {
    println!("=== table2 ablations (self_label) ===");
    let spec = SceneSpec::default();
    let mut results: Vec<(AblationKind, Vec<f64>)> =
        AblationKind::ALL.iter().map(|k| (*k, Vec::new())).collect();
    let mut precisions = Vec::new();
    let mut sup_aps = Vec::new();
    for seed in 0..seeds {
        let (labeled, unlabeled, test) = splits(1000 + seed, &spec, 36, 128, 240);
        let sup = train_run(
            &TrainConfig { mode: TrainMode::Supervised, ..base_cfg(seed) },
            &labeled, &[], &test,
        ).unwrap();
        sup_aps.push(sup.final_ap50[0]);
        for (kind, accs) in results.iter_mut() {
            let cfg = TrainConfig {
                mode: TrainMode::SelfLabel,
                ablation: *kind,
                ..base_cfg(seed)
            };
            let r = train_run(&cfg, &labeled, &unlabeled, &test).unwrap();
            accs.push(r.final_ap50_all_point[0]);
            if *kind == AblationKind::None {
                let ps: Vec<f64> =
                    r.windows.iter().filter_map(|w| w.pseudo_precision).collect();
                if !ps.is_empty() {
                    precisions.push(mean(&ps));
                }
            }
        }
    }
    for (kind, accs) in &results {
        println!("{:12} mean AP50 {:.4}  (seeds: {:?})", kind.name(), mean(accs),
            accs.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
    let ap = |k: AblationKind| &results.iter().find(|(kk, _)| *kk == k).unwrap().1;
    let none = ap(AblationKind::None);
    let discard = ap(AblationKind::DiscardFp);
    let random = ap(AblationKind::RandomFp);
    let gt = ap(AblationKind::GtLabels);
    let frac = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).filter(|(x, y)| x > y).count() as f64 / a.len() as f64
    };
    println!("mean pseudo precision (none): {:.3}; supervised baseline {:.3}", mean(&precisions), mean(&sup_aps));
    println!("means: gt {:.4} > discard {:.4} >= random {:.4} > none {:.4}",
        mean(gt), mean(discard), mean(random), mean(none));
    println!("per-seed gt>discard: {:.2}  random>none: {:.2}  gt>none: {:.2}  discard>none: {:.2}",
        frac(gt, discard), frac(random, none), frac(gt, none), frac(discard, none));
}

fn table5(seeds: u64, corrupt_q: f64) {
    println!("=== table5 strategies (oracle-seeded detectors, q={corrupt_q}) ===");
    let spec = SceneSpec {
        max_objects: 2,
        difficulty_spread: 0.8,
        ..SceneSpec::default()
    };
    let modes = [
        TrainMode::SelfLabel,
        TrainMode::Cps,
        TrainMode::CoRectify,
        TrainMode::Intersection,
        TrainMode::Difference,
        TrainMode::CrossRectify,
    ];
    let mut by_mode: Vec<(TrainMode, Vec<f64>)> = modes.iter().map(|m| (*m, Vec::new())).collect();
    let mut prec_by_mode: Vec<(TrainMode, Vec<f64>, Vec<f64>)> =
        modes.iter().map(|m| (*m, Vec::new(), Vec::new())).collect();
    let mut fused_vs_best = Vec::new();
    let mut windows_cross: Vec<Vec<Option<f64>>> = Vec::new();
    let mut windows_self: Vec<Vec<Option<f64>>> = Vec::new();

    for seed in 0..seeds {
        let (labeled, unlabeled, test) = splits(2000 + seed, &spec, 36, 128, 240);
        // seed two detectors by pretraining on labels corrupted by two
        // differently biased oracles
        let noise_a = NoiseModel::single_bias(spec.classes, 0, 1, corrupt_q);
        let noise_b = NoiseModel::single_bias(spec.classes, 1, 2, corrupt_q);
        let corrupt_stream = SeedStream::new(7000 + seed);
        let lab_a = corrupt_labels(&labeled, &noise_a, &mut corrupt_stream.child("a").rng());
        let lab_b = corrupt_labels(&labeled, &noise_b, &mut corrupt_stream.child("b").rng());
        let phase2 = |mode: TrainMode, detectors: usize, labs: Vec<Vec<ToyScene>>| {
            let cfg = TrainConfig {
                mode,
                detectors,
                // the original cross-pseudo-supervision scheme takes the
                // partner's boxes without confidence thresholding
                tau: if mode == TrainMode::Cps { 0.0 } else { 0.6 },
                iterations: 4000,
                warmup_iterations: 1500,
                learning_rate: 0.1,
                ema_decay: 0.995,
                lambda_max: 1.5,
                batch_labeled: 24,
                batch_unlabeled: 32,
                feedforward_noise: 0.25,
                seed,
                ..TrainConfig::default()
            };
            let opts = TrainOptions { per_detector_labeled: Some(labs), initial_params: None };
            train_run_with(&cfg, &labeled, &unlabeled, &test, &opts).unwrap()
        };

        for ((mode, accs), (_, precs, totals)) in by_mode.iter_mut().zip(prec_by_mode.iter_mut()) {
            let r = if matches!(mode, TrainMode::SelfLabel) {
                let ra = phase2(*mode, 1, vec![lab_a.clone()]);
                let rb = phase2(*mode, 1, vec![lab_b.clone()]);
                accs.push((ra.final_ap50_all_point[0] + rb.final_ap50_all_point[0]) / 2.0);
                windows_self.push(ra.windows.iter().map(|w| w.pseudo_precision).collect());
                ra
            } else {
                let r = phase2(*mode, 2, vec![lab_a.clone(), lab_b.clone()]);
                accs.push(mean(&r.final_ap50_all_point));
                if *mode == TrainMode::CrossRectify {
                    windows_cross.push(r.windows.iter().map(|w| w.pseudo_precision).collect());
                    let best =
                        r.final_ap50_all_point.iter().cloned().fold(f64::MIN, f64::max);
                    fused_vs_best.push((r.final_ap50_fused_all_point.unwrap(), best));
                }
                r
            };
            let ps: Vec<f64> = r.windows.iter().filter_map(|w| w.pseudo_precision).collect();
            if !ps.is_empty() { precs.push(mean(&ps)); }
            totals.push(r.windows.iter().map(|w| w.pseudo_total as f64).sum::<f64>());
        }
    }

    let cross = by_mode.iter().find(|(m, _)| *m == TrainMode::CrossRectify).unwrap().1.clone();
    for ((mode, accs), (_, precs, totals)) in by_mode.iter().zip(&prec_by_mode) {
        let beat = cross.iter().zip(accs).filter(|(c, a)| c > a).count() as f64
            / cross.len() as f64;
        println!(
            "{:14} mean AP50 {:.4}   cross beats in {:.2} of seeds   pseudo prec {:.3} vol {:.0}",
            mode.name(), mean(accs), beat, mean(precs), mean(totals)
        );
    }
    let fwin = fused_vs_best.iter().filter(|(f, b)| f >= b).count() as f64
        / fused_vs_best.len() as f64;
    println!("wbf >= best single in {:.2} of seeds ({} seeds), mean fused {:.4} vs best {:.4}",
        fwin, fused_vs_best.len(),
        mean(&fused_vs_best.iter().map(|x| x.0).collect::<Vec<_>>()),
        mean(&fused_vs_best.iter().map(|x| x.1).collect::<Vec<_>>()));

    let n_windows = windows_cross.iter().map(|w| w.len()).min().unwrap_or(0);
    let mut wins = 0;
    for w in 0..n_windows {
        let avg = |rows: &Vec<Vec<Option<f64>>>| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[w]).collect();
            mean(&vals)
        };
        if avg(&windows_cross) >= avg(&windows_self) {
            wins += 1;
        }
    }
    println!("fig4b: cross >= self in {}/{} windows", wins, n_windows);
}

fn fig4a(seeds: u64) {
    println!("=== fig4a online teacher KL ===");
    let spec = SceneSpec::default();
    for seed in 0..seeds {
        let (labeled, unlabeled, test) = splits(3000 + seed, &spec, 20, 80, 20);
        let cfg = TrainConfig {
            mode: TrainMode::OnlineTeacher,
            detectors: 1,
            ..base_cfg(seed)
        };
        let r = train_run(&cfg, &labeled, &unlabeled, &test).unwrap();
        let kls: Vec<f64> = r.windows.iter().map(|w| w.mean_kl).collect();
        let peak = kls.iter().cloned().fold(f64::MIN, f64::max);
        let tail_n = (kls.len() as f64 * 0.1).ceil() as usize;
        let tail = mean(&kls[kls.len() - tail_n..]);
        println!("seed {seed}: peak {:.5} tail {:.5} ratio {:.3}", peak, tail, tail / peak);
    }
}

fn sup_probe() {
    println!("=== supervised lr/iteration sweep ===");
    let spec = SceneSpec::default();
    for &lr in &[0.05, 0.1, 0.15, 0.2] {
        for &iters in &[2000usize, 4000, 8000] {
            let mut aps = Vec::new();
            for seed in 0..4u64 {
                let (labeled, _unl, test) = splits(1000 + seed, &spec, 10, 1, 40);
                let cfg = TrainConfig {
                    mode: TrainMode::Supervised,
                    detectors: 1,
                    learning_rate: lr,
                    iterations: iters,
                    warmup_iterations: iters / 10,
                    ..base_cfg(seed)
                };
                let r = train_run(&cfg, &labeled, &[], &test).unwrap();
                aps.push(r.final_ap50[0]);
            }
            println!("lr {lr:5} iters {iters:5}: mean AP {:.4} {:?}", mean(&aps),
                aps.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
        }
    }
}

fn diff_probe() {
    println!("=== difficulty sweep: supervised AP vs self-label precision ===");
    for &noise in &[0.8, 1.0, 1.2, 1.5] {
        for &strength in &[0.8, 1.0] {
            let spec = SceneSpec { feature_noise: noise, signature_strength: strength, ..SceneSpec::default() };
            let mut sup_aps = Vec::new();
            let mut sela_aps = Vec::new();
            let mut precisions = Vec::new();
            for seed in 0..4u64 {
                let (labeled, unlabeled, test) = splits(1000 + seed, &spec, 36, 128, 240);
                let sup = train_run(
                    &TrainConfig { mode: TrainMode::Supervised, ..base_cfg(seed) },
                    &labeled, &[], &test,
                ).unwrap();
                sup_aps.push(sup.final_ap50[0]);
                let sela = train_run(
                    &TrainConfig { mode: TrainMode::SelfLabel, ..base_cfg(seed) },
                    &labeled, &unlabeled, &test,
                ).unwrap();
                sela_aps.push(sela.final_ap50[0]);
                let ps: Vec<f64> = sela.windows.iter().filter_map(|w| w.pseudo_precision).collect();
                precisions.push(mean(&ps));
            }
            println!(
                "noise {noise:4} strength {strength:4}: sup AP {:.3} sela AP {:.3} precision {:.3}",
                mean(&sup_aps), mean(&sela_aps), mean(&precisions)
            );
        }
    }
}

fn sela_probe() {
    println!("=== self-label: correlation x noise x lambda ===");
    for &rho in &[0.6, 0.75, 0.85] {
        for &noise in &[0.8, 1.0] {
            let spec = SceneSpec {
                signature_correlation: rho,
                feature_noise: noise,
                ..SceneSpec::default()
            };
            let mut sup_aps = Vec::new();
            for seed in 0..6u64 {
                let (labeled, _u, test) = splits(1000 + seed, &spec, 36, 128, 240);
                let sup = train_run(
                    &TrainConfig { mode: TrainMode::Supervised, ..base_cfg(seed) },
                    &labeled, &[], &test,
                ).unwrap();
                sup_aps.push(sup.final_ap50[0]);
            }
            for &lambda in &[0.5, 1.0] {
                let mut sela_aps = Vec::new();
                let mut precisions = Vec::new();
                for seed in 0..6u64 {
                    let (labeled, unlabeled, test) = splits(1000 + seed, &spec, 36, 128, 240);
                    let base = base_cfg(seed);
                    let cfg = TrainConfig {
                        mode: TrainMode::SelfLabel,
                        lambda_max: lambda,
                        warmup_iterations: (base.iterations as f64 * 0.3) as usize,
                        ..base
                    };
                    let r = train_run(&cfg, &labeled, &unlabeled, &test).unwrap();
                    sela_aps.push(r.final_ap50[0]);
                    let ps: Vec<f64> =
                        r.windows.iter().filter_map(|w| w.pseudo_precision).collect();
                    precisions.push(mean(&ps));
                }
                println!(
                    "rho {rho} noise {noise} lambda {lambda:4}: sup {:.3} sela {:.3} prec {:.3}",
                    mean(&sup_aps), mean(&sela_aps), mean(&precisions)
                );
            }
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let q: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    match what {
        "diff" => diff_probe(),
        "headroom" => headroom(),
        "inspect" => inspect(),
        "emissions" => emissions(),
        "sup" => sup_probe(),
        "sela" => sela_probe(),
        "table2" => table2(seeds),
        "table5" => table5(seeds, q),
        "fig4a" => fig4a(seeds),
        _ => {
            table2(seeds);
            table5(seeds, q);
            fig4a(seeds.min(4));
        }
    }
}

fn headroom() {
    println!("=== supervised headroom: few vs all labels ===");
    let spec = SceneSpec::default();
    for &n_lab in &[6usize, 12, 20, 100] {
        let mut aps = Vec::new();
        for seed in 0..6u64 {
            let all = generate_scenes(1000 + seed, n_lab + 40, &spec);
            let labeled = all[..n_lab].to_vec();
            let test = all[n_lab..].to_vec();
            let cfg = TrainConfig { mode: TrainMode::Supervised, ..base_cfg(seed) };
            let r = train_run(&cfg, &labeled, &[], &test).unwrap();
            aps.push(r.final_ap50[0]);
        }
        println!("labeled {n_lab:4}: mean AP {:.3} {:?}", mean(&aps),
            aps.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}

fn inspect() {
    println!("=== anatomy of supervised failures ===");
    let spec = SceneSpec::default();
    for &n_lab in &[20usize, 100] {
        for seed in 0..4u64 {
            let all = generate_scenes(1000 + seed, n_lab + 40, &spec);
            let labeled = all[..n_lab].to_vec();
            let test = all[n_lab..].to_vec();
            let cfg = TrainConfig { mode: TrainMode::Supervised, ..base_cfg(seed) };
            let r = train_run(&cfg, &labeled, &[], &test).unwrap();
            let params = &r.ema[0];
            let mut n_obj = 0usize;
            let mut n_det = 0usize;
            let mut loc_hits = 0usize;
            let mut cls_hits = 0usize;
            for scene in &test {
                let dets = crossrectify::toylab::toy_forward(params, scene);
                n_obj += scene.gt.len();
                n_det += dets.len();
                for obj in &scene.gt {
                    let ob = obj.geometry.as_planar().unwrap();
                    let mut best: Option<(f64, usize)> = None;
                    for d in dets.iter() {
                        let v = crossrectify::matching::iou_2d(
                            d.geometry.as_planar().unwrap(), ob);
                        if best.map_or(true, |(bv, _)| v > bv) {
                            best = Some((v, d.argmax_class()));
                        }
                    }
                    if let Some((v, class)) = best {
                        if v >= 0.5 {
                            loc_hits += 1;
                            if class == obj.class_index {
                                cls_hits += 1;
                            }
                        }
                    }
                }
            }
            println!(
                "lab {n_lab:4} seed {seed}: AP {:.3} | objects {n_obj} dets {n_det} loc-recall {:.3} cls-acc|loc {:.3}",
                r.final_ap50[0],
                loc_hits as f64 / n_obj as f64,
                cls_hits as f64 / loc_hits.max(1) as f64,
            );
        }
    }
}

fn emissions() {
    println!("=== teacher emission anatomy at mid-training ===");
    let spec = SceneSpec::default();
    for seed in 0..3u64 {
        let (labeled, unlabeled, test) = splits(1000 + seed, &spec, 36, 128, 240);
        let _ = test;
        // supervised-only warmup to get a teacher
        let cfg = TrainConfig {
            mode: TrainMode::Supervised,
            iterations: 2000,
            warmup_iterations: 2000,
            learning_rate: 0.1,
            ema_decay: 0.995,
            batch_labeled: 16,
            ..TrainConfig::default()
        };
        let r = train_run(&cfg, &labeled, &[], &labeled).unwrap();
        let teacher = &r.ema[0];
        let mut hist = [0usize; 10];
        let mut per_band_tp = [0usize; 10];
        let mut n_scenes_with = 0usize;
        let mut total = 0usize;
        for scene in &unlabeled {
            let dets = crossrectify::toylab::toy_forward(teacher, scene);
            if !dets.is_empty() { n_scenes_with += 1; }
            for d in dets.iter() {
                let conf = d.confidence();
                let band = ((conf * 10.0) as usize).min(9);
                hist[band] += 1;
                total += 1;
                let ob = scene.gt[0].geometry.as_planar().unwrap();
                let iou = crossrectify::matching::iou_2d(d.geometry.as_planar().unwrap(), ob);
                if iou >= 0.5 && d.argmax_class() == scene.gt[0].class_index {
                    per_band_tp[band] += 1;
                }
            }
        }
        println!("seed {seed}: {} scenes, {} emissions, {:.2} per scene ({} scenes with >=1)",
            unlabeled.len(), total, total as f64 / unlabeled.len() as f64, n_scenes_with);
        for b in 0..10 {
            if hist[b] > 0 {
                println!("  conf {:.1}-{:.1}: {:4} boxes, precision {:.3}",
                    b as f64 / 10.0, (b + 1) as f64 / 10.0,
                    hist[b], per_band_tp[b] as f64 / hist[b] as f64);
            }
        }
    }
}
