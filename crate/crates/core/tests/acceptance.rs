//! Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorforge::data::{DatasetManifest, GradeMask, MCSlice, Plane};
use tumorforge::engine::{Graph, Tensor};
use tumorforge::evaluation::{augmentation_experiment, fid, fid_per_contrast, region_counts, seg_metrics, RegionCounts};
use tumorforge::geometry::{binarize, quantize_grades, render_circles, simplify_to_circles, ConcentricCircles};
use tumorforge::nets::{
    build_d_inpaint, build_feature_extractor, build_g_inpaint, save_checkpoint, ExtractorMode, Network, NetworkKind,
};
use tumorforge::phantom::{generate_phantom, PhantomConfig};
use tumorforge::synthesis::{sample_circles, synthesize_batch, synthesize_one, ModelBundle, Synthesis, SynthesisConfig};
use tumorforge::training::{
    grade_samples, train_g_binary, train_g_grade, train_inpaint, train_segmentation, training_records, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(results: &mut Vec<bool>, n: usize, name: &str, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {verdict} {name}: {} [{:.1} s]", o.detail, t.elapsed().as_secs_f64());
    results.push(o.pass);
}

fn c1_geometry_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut max_r, mut max_c) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let r1 = rng.random_range(8.0..60.0);
        let r2 = rng.random_range(0.0..=r1);
        let r3 = rng.random_range(0.0..=r2);
        let cx = rng.random_range(r1 + 1.0..255.0 - r1);
        let cy = rng.random_range(r1 + 1.0..255.0 - r1);
        let c = ConcentricCircles::new(cx, cy, r1, r2, r3).unwrap();
        let s = simplify_to_circles(&render_circles(&c, 256, 256)).unwrap();
        for (a, b) in [(c.r1, s.r1), (c.r2, s.r2), (c.r3, s.r3)] {
            max_r = max_r.max((a - b).abs());
        }
        max_c = max_c.max(((c.cx - s.cx).powi(2) + (c.cy - s.cy).powi(2)).sqrt());
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        max_r <= 1.5 && max_c <= 1.0 && secs < 10.0,
        format!("100 circles at 256: max radius error {max_r:.3} px, max center error {max_c:.3} px, {secs:.2} s"),
    )
}

fn c2_area_policy(data: &DatasetManifest) -> Outcome {
    let masks: Vec<&GradeMask> =
        data.records.iter().filter(|r| r.has_tumor()).filter_map(|r| r.grade_mask.as_ref()).take(100).collect();
    let mut worst = f64::INFINITY;
    for m in &masks {
        let r1 = simplify_to_circles(m).unwrap().r1;
        let slack = 2.0 * PI * r1 + 4.0 - (PI * r1 * r1 - m.tumor_pixels() as f64).abs();
        worst = worst.min(slack);
    }
    outcome(masks.len() == 100 && worst >= 0.0, format!("{} phantom masks, smallest remaining slack {worst:.3} px²", masks.len()))
}

fn c3_gradients() -> Outcome {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    let mut refined = 0;
    for kind in NetworkKind::ALL {
        let r = common::check_network(kind, 7, 24);
        pass &= r.ok() && r.checked >= 20;
        refined += r.refined;
        lines.push(format!("{} {:.1e}", r.name, r.max_rel));
    }
    for r in common::check_losses(7) {
        pass &= r.ok();
        refined += r.refined;
        lines.push(format!("{} {:.1e}", r.name, r.max_rel));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        pass && secs < 120.0,
        format!("max relative errors [{}]; {refined} kink-straddling probes re-checked at step 1e-5; {secs:.1} s", lines.join(", ")),
    )
}

fn c4_architecture() -> Outcome {
    let mut expected: BTreeMap<String, [usize; 3]> = [
        ("image_enc.cir1", [32, 128, 128]),
        ("image_enc.cir2", [128, 64, 64]),
        ("image_enc.res0", [128, 64, 64]),
        ("image_enc.res1", [128, 64, 64]),
        ("image_enc.res2", [128, 64, 64]),
        ("mask_enc.cir1", [4, 128, 128]),
        ("mask_enc.cir2", [16, 64, 64]),
        ("features", [144, 64, 64]),
        ("output", [4, 256, 256]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    for c in 0..4 {
        for (k, v) in [
            ("cir1", [256, 64, 64]),
            ("res2", [256, 64, 64]),
            ("up1", [256, 128, 128]),
            ("cir2", [128, 128, 128]),
            ("up2", [128, 256, 256]),
            ("cir3", [64, 256, 256]),
            ("out", [1, 256, 256]),
        ] {
            expected.insert(format!("dec{c}.{k}"), v);
        }
    }
    let d_expected: BTreeMap<String, [usize; 3]> = [
        ("cir1", [32, 128, 128]),
        ("cir2", [64, 64, 64]),
        ("cir3", [256, 64, 64]),
        ("res2", [256, 64, 64]),
        ("cir4", [64, 64, 64]),
        ("out", [1, 64, 64]),
        ("output", [1, 1, 1]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let record = |net: &Network| {
        let mut g = Graph::<f32>::new();
        let p = net.bind(&mut g, false);
        let xs: Vec<_> =
            net.input_spec().iter().map(|&[c, h, w]| g.constant(Tensor::full([1, c, h, w], 0.25))).collect();
        net.forward_traced(&mut g, &p, &xs).1.into_iter().collect::<BTreeMap<_, _>>()
    };
    let mut mismatches = Vec::new();
    for (net, table) in [(build_g_inpaint(256, 0).unwrap(), &expected), (build_d_inpaint(256, 0).unwrap(), &d_expected)] {
        let trace = record(&net);
        for (label, shape) in table {
            if trace.get(label) != Some(shape) {
                mismatches.push(format!("{} {label}: {:?} != {shape:?}", net.kind().name(), trace.get(label)));
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{} G_inpaint and {} D_inpaint shapes match at 256", expected.len(), d_expected.len())
        } else {
            mismatches.join("; ")
        },
    )
}

struct DeskModels {
    bundle: ModelBundle,
}

fn c5_desk_training(data: &DatasetManifest, models: &mut Option<DeskModels>) -> Outcome {
    let t = Instant::now();
    let masks = TrainConfig { epochs: 30, batch_size: 8, ..TrainConfig::default() };
    let (g_binary, rb) = train_g_binary(data, &masks).unwrap();
    let (g_grade, _) = train_g_grade(data, &masks).unwrap();
    let inpaint = TrainConfig { epochs: 30, batch_size: 4, ..TrainConfig::default() };
    let (g_inpaint, d_inpaint, ri) = train_inpaint(data, &inpaint).unwrap();
    let secs = t.elapsed().as_secs_f64();

    let binary_drop = 1.0 - rb.val_loss.last().unwrap() / rb.val_loss[0];
    let pix_drop = 1.0 - ri.train_terms.last().unwrap().pix / ri.train_terms[0].pix;

    // Grade accuracy over pixels G_grade itself places inside a tumor, on
    // held-out slices.
    let val = data.subset("val");
    let (mut hit, mut total) = (0usize, 0usize);
    for s in grade_samples(&training_records(&val)).unwrap() {
        let y = g_grade.predict(&[&s.inputs[0]]).unwrap();
        let [_, _, h, w] = y.shape();
        let q = quantize_grades(&Plane::new(h, w, y.into_vec()));
        for (p, t) in q.plane().data().iter().zip(s.target.data()) {
            if *p > 0.0 {
                total += 1;
                hit += (p == t) as usize;
            }
        }
    }
    let grade_acc = hit as f64 / total.max(1) as f64;

    *models = Some(DeskModels {
        bundle: ModelBundle {
            g_binary: Some(g_binary),
            g_grade: Some(g_grade),
            g_inpaint: Some(g_inpaint),
            d_inpaint: Some(d_inpaint),
        },
    });
    outcome(
        binary_drop >= 0.5 && grade_acc >= 0.8 && pix_drop >= 0.4 && secs < 1800.0,
        format!(
            "{} slices at 64, 30 epochs: G_binary val L1 drop {:.1}%, grade accuracy {:.1}% over {total} px, inpaint pixel term drop {:.1}%, {secs:.0} s",
            data.len(),
            100.0 * binary_drop,
            100.0 * grade_acc,
            100.0 * pix_drop
        ),
    )
}

fn normal_pool(data: &DatasetManifest, split: &str) -> DatasetManifest {
    DatasetManifest::new(data.split(split).into_iter().filter(|r| !r.has_tumor()).cloned().collect())
}

fn c6_algorithm(data: &DatasetManifest, models: &ModelBundle) -> Outcome {
    let normals = normal_pool(data, "train");
    let pool: Vec<MCSlice> = normals.records.iter().map(|r| r.images.normalized().unwrap()).collect();
    let cfg = SynthesisConfig::for_size(64, 64, 2024);
    // Drive single attempts directly so that each sample's source is known.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut accepted, mut attempts, mut contained, mut faithful) = (0, 0, 0, 0);
    while accepted < 64 && attempts < 64 * cfg.max_attempts_per_image {
        let x_n = &pool[attempts % pool.len()];
        attempts += 1;
        let c = sample_circles(&mut rng, &cfg);
        let Synthesis::Accepted { image, grade } = synthesize_one(x_n, &c, models).unwrap() else { continue };
        accepted += 1;
        let m = binarize(grade.plane(), 0.0);
        let support = x_n.support();
        let outside: usize = (0..m.plane().data().len()).filter(|&i| m.is_set(i) && !support.is_set(i)).count();
        contained += (outside == 0) as usize;
        let same = (0..4).all(|ch| {
            let (a, b) = (image.channel(ch), x_n.channel(ch));
            (0..a.len()).all(|i| m.is_set(i) || a[i].to_bits() == b[i].to_bits())
        });
        faithful += same as usize;
    }
    let batch = synthesize_batch(&normals, &cfg, models);
    let batch_ok = batch.as_ref().map(|m| m.len() == 64).unwrap_or(false);
    outcome(
        accepted == 64 && contained == 64 && faithful == 64 && batch_ok,
        format!(
            "{accepted} accepted from {attempts} attempts; contained {contained}/64; outside-mask bit-equal {faithful}/64; batch run {}",
            if batch_ok { "produced 64" } else { "failed" }
        ),
    )
}

fn c7_fid(data: &DatasetManifest) -> Outcome {
    let images: Vec<MCSlice> = data.records.iter().map(|r| r.images.normalized().unwrap()).collect();
    let half = images.len() / 2;
    let a: Vec<&MCSlice> = images[..half].iter().collect();
    let b: Vec<&MCSlice> = images[half..].iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noise: Vec<MCSlice> = (0..half)
        .map(|_| MCSlice::from_raw(64, 64, (0..4 * 64 * 64).map(|_| rng.random_range(-0.5f32..5.0)).collect()))
        .collect();
    let noise: Vec<&MCSlice> = noise.iter().collect();
    let psi = build_feature_extractor(ExtractorMode::FixedRandom, 0, None).unwrap();
    let same = fid_per_contrast(&psi, &a, &b).unwrap().average;
    let diff = fid_per_contrast(&psi, &a, &noise).unwrap().average;

    let cases = [
        (common::three_point(0.0, 1.0), common::three_point(0.0, 1.0), common::gaussian_fid_1d(0.0, 1.0, 0.0, 1.0)),
        (common::three_point(0.0, 1.0), common::three_point(1.0, 1.0), common::gaussian_fid_1d(0.0, 1.0, 1.0, 1.0)),
        (common::three_point(0.0, 1.0), common::three_point(0.0, 4.0), common::gaussian_fid_1d(0.0, 1.0, 0.0, 4.0)),
    ];
    let worst = cases.iter().map(|(x, y, want)| (fid(x, y).unwrap() - want).abs()).fold(0.0, f64::max);
    outcome(
        diff >= 5.0 * same && worst <= 1e-6,
        format!("FID(A,B) {same:.4}, FID(A,noise) {diff:.4}, ratio {:.1}; 1-D oracle max error {worst:.1e}", diff / same),
    )
}

fn c8_metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grades = [0.0, 0.5, 0.75, 1.0];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let pred: Vec<u8> = (0..256).map(|_| rng.random_range(0..5)).collect();
        let gt: Vec<f32> = (0..256).map(|_| grades[rng.random_range(0..4)]).collect();
        let mask = GradeMask::new(Plane::new(16, 16, gt.clone())).unwrap();
        let s = seg_metrics(&pred, &mask).unwrap();
        let counts = region_counts(&pred, &mask).unwrap();
        for (((_, r), o), c) in s.regions().iter().zip(common::oracle_scores(&pred, &gt)).zip(counts) {
            if (c.tp, c.fp, c.fn_) != (o.0, o.1, o.2) || (r.dice, r.sensitivity, r.precision) != (o.3, o.4, o.5) {
                mismatches += 1;
            }
        }
    }
    let s = RegionCounts { tp: 2, fp: 1, fn_: 1, tn: 12 }.scores();
    let third = 2.0 / 3.0;
    // The same example through label maps: WT has TP=2, FP=1, FN=1.
    let mask = GradeMask::new(Plane::new(1, 5, vec![0.5, 0.5, 0.5, 0.0, 0.0])).unwrap();
    let via_maps = seg_metrics(&[2, 2, 1, 2, 0], &mask).unwrap().wt;
    let counted = [s.dice, s.sensitivity, s.precision, via_maps.dice, via_maps.sensitivity, via_maps.precision]
        .iter()
        .all(|&v| v == third);
    outcome(
        mismatches == 0 && counted,
        format!("1000 random 16x16 cases, {mismatches} region mismatches; counted example gives 2/3 for all three: {counted}"),
    )
}

fn c9_augmentation(data: &DatasetManifest, models: &ModelBundle) -> Outcome {
    let train: Vec<_> = data.split("train").into_iter().take(200).cloned().collect();
    let val: Vec<_> = data.split("val").into_iter().cloned().collect();
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), train.iter().map(|r| r.id.clone()).collect());
    splits.insert("val".to_string(), val.iter().map(|r| r.id.clone()).collect());
    let real = DatasetManifest { records: train.into_iter().chain(val).collect(), splits };
    let synth = synthesize_batch(&normal_pool(data, "train"), &SynthesisConfig::for_size(64, 200, 900), models).unwrap();
    let test = data.subset("test");

    let mut rows = Vec::new();
    for seed in [0u64, 1, 2] {
        let cfg = TrainConfig { epochs: 30, batch_size: 8, seed, ..TrainConfig::segmentation() };
        let report = augmentation_experiment(&real, &synth, &test, &cfg, None).unwrap();
        rows.push((report.dice_wt("baseline").unwrap(), report.dice_wt("augmented").unwrap()));
    }
    let per_seed = rows.iter().all(|(b, a)| *a >= b - 0.02);
    let mean = |f: fn(&(f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let (mb, ma) = (mean(|r| r.0), mean(|r| r.1));
    let listed: Vec<String> = rows.iter().map(|(b, a)| format!("{b:.3}->{a:.3}")).collect();
    outcome(
        per_seed && ma >= mb,
        format!("Dice(WT) baseline->augmented per seed [{}], means {mb:.3}->{ma:.3}", listed.join(", ")),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        if p.is_dir() {
            out.extend(snapshot(&p).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
    out
}

fn full_pipeline(root: &Path) {
    let data = generate_phantom(&PhantomConfig { size: 64, n_subjects: 6, slices_per_subject: 4, tumor_probability: 0.5, seed: 3 })
        .unwrap();
    data.save(&root.join("phantom")).unwrap();
    let data = DatasetManifest::load(&root.join("phantom")).unwrap();
    let models = root.join("models");
    fs::create_dir_all(&models).unwrap();
    let cfg = TrainConfig { epochs: 20, batch_size: 4, checkpoint_every: 5, ..TrainConfig::default() };
    let (g_binary, _) = train_g_binary(&data, &cfg).unwrap();
    let (g_grade, _) = train_g_grade(&data, &cfg).unwrap();
    let (g_inpaint, d_inpaint, _) = train_inpaint(&data, &TrainConfig { epochs: 2, ..cfg.clone() }).unwrap();
    let bundle = ModelBundle {
        g_binary: Some(g_binary),
        g_grade: Some(g_grade),
        g_inpaint: Some(g_inpaint),
        d_inpaint: Some(d_inpaint),
    };
    bundle.save(&models).unwrap();
    let bundle = ModelBundle::load(&models).unwrap();
    let synth = synthesize_batch(&normal_pool(&data, "train"), &SynthesisConfig::for_size(64, 8, 11), &bundle).unwrap();
    synth.save(&root.join("synth")).unwrap();
    let (seg, _) = train_segmentation(&data, &TrainConfig { epochs: 2, ..TrainConfig::segmentation() }).unwrap();
    save_checkpoint(&seg, 2, None, &root.join("seg.safetensors")).unwrap();
}

fn c10_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    full_pipeline(a.path());
    full_pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let differing: Vec<&String> = sa.iter().zip(&sb).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    let big = generate_phantom(&PhantomConfig::default()).unwrap() == generate_phantom(&PhantomConfig::default()).unwrap();
    outcome(
        sa.len() == sb.len() && differing.is_empty() && big,
        format!(
            "two pipeline runs wrote {} files each, {} differ; 400-slice phantom regenerated identically: {big}",
            sa.len(),
            differing.len()
        ),
    )
}

fn main() {
    let started = Instant::now();
    let mut results = Vec::new();
    let data = generate_phantom(&PhantomConfig::default()).unwrap();

    run(&mut results, 1, "geometry round-trip", c1_geometry_round_trip);
    run(&mut results, 2, "area policy", || c2_area_policy(&data));
    run(&mut results, 3, "gradient suite", c3_gradients);
    run(&mut results, 4, "architecture conformance", c4_architecture);
    let mut models = None;
    run(&mut results, 5, "desk-scale training", || c5_desk_training(&data, &mut models));
    match &models {
        Some(m) => run(&mut results, 6, "synthesis end to end", || c6_algorithm(&data, &m.bundle)),
        None => run(&mut results, 6, "synthesis end to end", || outcome(false, "no trained models".into())),
    }
    run(&mut results, 7, "FID sanity ordering", || c7_fid(&data));
    run(&mut results, 8, "metric oracle equivalence", c8_metric_oracle);
    match &models {
        Some(m) => run(&mut results, 9, "augmentation direction", || c9_augmentation(&data, &m.bundle)),
        None => run(&mut results, 9, "augmentation direction", || outcome(false, "no trained models".into())),
    }
    run(&mut results, 10, "determinism", c10_determinism);

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed in {:.0} s", results.len(), started.elapsed().as_secs_f64());
    if passed != results.len() {
        std::process::exit(1);
    }
}
