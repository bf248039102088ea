//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default. `PLACE_ACCEPTANCE=1,2,12` restricts the
//! run to a subset while iterating locally.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use place_autograd::{Graph, Tensor, Var};
use place_core::diffusion::{AlphaMode, Conditioning, ModelConfig, PlaceModel};
use place_core::experiment::{run_variant, Budget, ExperimentData, VariantOutcome};
use place_core::fusion_attention::{fuse, fuse_values, place_attention_forward, AttentionMaps, CrossAttentionWeights, FusionControl, FusionDomain};
use place_core::layout_control::{compute_lcm, majority_downsample, nearest_lcm_baseline, reconstruct_map, Coverage, LayoutControlMap};
use place_core::losses::{ldm_loss, sa_loss};
use place_core::semantic_map::{one_hot_layout, present_classes, SemanticMap};
use place_core::synth_data::{gen_scene, thin_structure_map, SceneOptions};
use place_core::text_semantics::TokenClassMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- helpers

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

/// Random map of up to 64×64: uniform noise overlaid with a few rectangles.
fn random_map(rng: &mut ChaCha8Rng, min_side: usize) -> SemanticMap {
    let h = rng.random_range(min_side..=64);
    let w = rng.random_range(min_side..=64);
    let c = rng.random_range(2..=6);
    let mut grid: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..c) as u8).collect();
    for _ in 0..rng.random_range(0..4) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..h) + 1, rng.random_range(c0..w) + 1);
        let class = rng.random_range(0..c) as u8;
        for r in r0..r1 {
            grid[r * w + c0..r * w + c1].fill(class);
        }
    }
    SemanticMap::new(h, w, class_names(c), grid).unwrap()
}

/// Present classes in shuffled token order plus one unmapped token.
fn random_tcm(rng: &mut ChaCha8Rng, map: &SemanticMap) -> TokenClassMap {
    let mut entries: Vec<Option<usize>> = present_classes(map).into_iter().map(Some).collect();
    entries.push(None);
    entries.shuffle(rng);
    TokenClassMap::new(entries)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn row_softmax(rows: usize, cols: usize, logits: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Central differences of `f` at `x`, step `h`.
fn numeric_grad(x: &[f64], h: f64, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt().max(analytic.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Splits a flat vector back into tensors of the given shapes.
fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s, flat[at..at + n].to_vec()).unwrap();
            at += n;
            t
        })
        .collect()
}

/// Gradient check of a scalar graph function of several leaf tensors.
fn grad_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |flat: &[f64]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = unflatten(flat, &shapes).into_iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&shapes)
        .flat_map(|(v, s)| grads.get(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; s.iter().product()]))
        .collect();
    rel_err(&analytic, &numeric_grad(&flat, 1e-3, &eval))
}

/// Scalar probe `Σ c ⊙ x` so every output entry gets a distinct weight.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = g.constant(rand_tensor(&mut rng, g.shape(x).to_vec().as_slice(), 1.0));
    let m = g.mul(x, c).unwrap();
    g.sum(m)
}

fn scene_lcm(rng: &mut ChaCha8Rng, latent: usize) -> LayoutControlMap {
    let scene = gen_scene(rng.random(), &SceneOptions { size: 16, ..SceneOptions::with_heldout(true) }).unwrap();
    let tcm = random_tcm(rng, &scene.map);
    compute_lcm(&scene.map, (latent, latent), &tcm).unwrap()
}

// ---------------------------------------------------------------- criteria

fn c1_lcm_exactness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut elapsed = 0.0;
    let (mut worst, mut non_divisible) = (0.0f64, 0);
    for k in 0..200 {
        let map = random_map(&mut rng, 8);
        let f = [1, 2, 4, 8][k % 4];
        let (sh, sw) = map.dims();
        let latent = (sh / f, sw / f);
        non_divisible += usize::from(sh % f != 0 || sw % f != 0);
        let tcm = random_tcm(&mut rng, &map);
        let t0 = Instant::now();
        let lcm = compute_lcm(&map, latent, &tcm).unwrap();
        elapsed += t0.elapsed().as_secs_f64();

        // oracle: assign every pixel to the token whose floor-partition range holds it
        let owner = |p: usize, n: usize, s: usize| (0..n).find(|&r| r * s / n <= p && p < (r + 1) * s / n).unwrap();
        let c = map.num_classes();
        let mut counts = vec![0usize; latent.0 * latent.1 * c];
        let mut area = vec![0usize; latent.0 * latent.1];
        for y in 0..sh {
            for x in 0..sw {
                let t = owner(y, latent.0, sh) * latent.1 + owner(x, latent.1, sw);
                counts[t * c + map.class_at(y, x)] += 1;
                area[t] += 1;
            }
        }
        for t in 0..latent.0 * latent.1 {
            for (j, e) in tcm.entries().iter().enumerate() {
                let want = match e {
                    None => Some(1.0),
                    Some(class) => match counts[t * c + class] {
                        0 => None,
                        n => Some(n as f64 / area[t] as f64),
                    },
                };
                match (lcm.get(t, j).value(), want) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    _ => worst = f64::INFINITY,
                }
            }
        }
    }
    let pass = worst <= 1e-9 && elapsed < 5.0 && non_divisible > 0;
    verdict(pass, format!("max |Δ| {worst:.1e} over 200 maps ({non_divisible} non-divisible), compute_lcm total {elapsed:.3}s"))
}

fn c2_factor_one_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ok = 0;
    for _ in 0..100 {
        let map = random_map(&mut rng, 1);
        let classes = map.num_classes();
        let tcm = TokenClassMap::new((0..classes).map(Some).collect());
        let lcm = compute_lcm(&map, map.dims(), &tcm).unwrap();
        let hot = one_hot_layout(&map);
        let same = (0..hot.rows()).all(|i| {
            (0..classes).all(|j| match lcm.get(i, j) {
                Coverage::Fraction(v) => v == 1.0 && hot.get(i, j) == 1,
                Coverage::Masked => hot.get(i, j) == 0,
            })
        });
        ok += usize::from(same && hot.rows() == lcm.tokens());
    }
    verdict(ok == 100, format!("{ok}/100 maps identical to the one-hot layout"))
}

fn c3_row_stochastic() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let lcm = scene_lcm(&mut rng, [2, 4, 8, 16][k % 4]);
        let (rows, cols) = (lcm.tokens(), lcm.channels());
        let logits: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-6.0..6.0)).collect();
        let attn = row_softmax(rows, cols, &logits);
        let alpha: f64 = rng.random_range(0.0..=1.0);
        let to32 = |v: &[f64]| Tensor::<f32>::from_f64(&[rows, cols], v).unwrap();
        for domain in [FusionDomain::Product, FusionDomain::Logit] {
            let f = fuse_values(&lcm, &to32(&attn), &to32(&logits), alpha as f32, domain).unwrap();
            for r in 0..rows {
                let s: f64 = f.data()[r * cols..(r + 1) * cols].iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    verdict(worst <= 1e-5, format!("max |row sum − 1| {worst:.1e} over 1000 triples (f32, both domains)"))
}

fn c4_alpha_zero_equivalence() -> Verdict {
    let mut model = PlaceModel::<f64>::new(ModelConfig::default(), 4).unwrap();
    // every weight random, so zero-initialized projections cannot hide a difference
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
    }
    let mut worst = 0.0f64;
    for k in 0..3u64 {
        let scene = gen_scene(40 + k, &SceneOptions::default()).unwrap();
        let (prompt, lcms) = model.layout_for(&scene.map, &[]).unwrap();
        let z = rand_tensor(&mut rng, &[3, 32, 32], 2.0);
        let t = [10, 500, 990][k as usize];
        let free = model.predict_eps(&z, t, &prompt, &Conditioning::Free).unwrap();
        let forced = Conditioning::Layout { lcms: &lcms, alpha: AlphaMode::Fixed(0.0), domain: FusionDomain::Product };
        let zeroed = model.predict_eps(&z, t, &prompt, &forced).unwrap();
        let fused = model.predict_eps(&z, t, &prompt, &model.conditioning(Some(&lcms))).unwrap();
        worst = worst.max(free.max_abs_diff(&zeroed));
        // guard: the layout path really is live in this model
        if fused.max_abs_diff(&free) < 1e-6 {
            return verdict(false, "layout path has no effect; comparison would be vacuous");
        }
    }
    verdict(worst < 1e-6, format!("max |Δε̂| {worst:.1e} between layout-free and α=0 forwards of the full UNet"))
}

fn c5_sa_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let hw = rng.random_range(1..=16);
        let n = rng.random_range(1..=4);
        let f = row_softmax(hw, n, &(0..hw * n).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
        let a = row_softmax(hw, hw, &(0..hw * hw).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<_>>());
        let mut brute = 0.0;
        for i in 0..n {
            for p in 0..hw {
                let mut w = 0.0;
                for j in 0..hw {
                    w += f[j * n + i] * a[j * hw + p];
                }
                brute += (w - f[p * n + i]).powi(2);
            }
        }
        let mut g = Graph::new();
        let fv = g.constant(Tensor::new(&[hw, n], f.clone()).unwrap());
        let av = g.constant(Tensor::new(&[hw, hw], a).unwrap());
        let l = sa_loss(&mut g, fv, av).unwrap();
        worst = worst.max((g.value(l).data()[0] - brute).abs());
    }
    let mut zero_worst = 0.0f64;
    for _ in 0..50 {
        let (hw, n) = (rng.random_range(1..=16), rng.random_range(1..=4));
        let mut g = Graph::new();
        let fv = g.constant(rand_tensor(&mut rng, &[hw, n], 1.0));
        let eye: Vec<f64> = (0..hw * hw).map(|k| if k / hw == k % hw { 1.0 } else { 0.0 }).collect();
        let av = g.constant(Tensor::new(&[hw, hw], eye).unwrap());
        let l = sa_loss(&mut g, fv, av).unwrap();
        zero_worst = zero_worst.max(g.value(l).data()[0].abs());
    }
    verdict(worst <= 1e-10 && zero_worst <= 1e-10, format!("max |Δ| {worst:.1e} vs triple loop; identity A^sa gives {zero_worst:.1e}"))
}

fn c6_gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };
    for k in 0..20u64 {
        let (hw, n) = (rng.random_range(2..=12), rng.random_range(1..=4));
        let fus = rand_tensor(&mut rng, &[hw, n], 1.0);
        let sa = rand_tensor(&mut rng, &[hw, hw], 1.0);
        note("sa_loss", grad_check(&[fus, sa], &|g, v| sa_loss(g, v[0], v[1]).unwrap()));

        let shape = [3, rng.random_range(2..6), rng.random_range(2..6)];
        let a = rand_tensor(&mut rng, &shape, 1.0);
        let b = rand_tensor(&mut rng, &shape, 1.0);
        note("ldm_loss", grad_check(&[a, b], &|g, v| ldm_loss(g, v[0], v[1]).unwrap()));

        let lcm = scene_lcm(&mut rng, [2, 4][k as usize % 2]);
        let (rows, cols) = (lcm.tokens(), lcm.channels());
        let logits = rand_tensor(&mut rng, &[rows, cols], 2.0);
        let alpha = Tensor::scalar(rng.random_range(0.1..0.9));
        for domain in [FusionDomain::Product, FusionDomain::Logit] {
            let e = grad_check(&[logits.clone(), alpha.clone()], &|g, v| {
                let attn = g.softmax_rows(v[0]).unwrap();
                let f = fuse(g, &lcm, &AttentionMaps { raw_logits: v[0], attn }, v[1], domain).unwrap();
                probe(g, f, k)
            });
            note("fuse", e);
        }

        let (dm, dt, d) = (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
        let inputs = [
            rand_tensor(&mut rng, &[rows, dm], 1.0),
            rand_tensor(&mut rng, &[cols, dt], 1.0),
            rand_tensor(&mut rng, &[dm, d], 0.7),
            rand_tensor(&mut rng, &[dt, d], 0.7),
            rand_tensor(&mut rng, &[dt, dm], 0.7),
            alpha.clone(),
        ];
        let e = grad_check(&inputs, &|g, v| {
            let w = CrossAttentionWeights { wq: v[2], wk: v[3], wv: v[4] };
            let control = FusionControl::Layout { lcm: &lcm, alpha: v[5], domain: FusionDomain::Product };
            let out = place_attention_forward(g, v[0], v[1], control, &w).unwrap();
            probe(g, out.out, k + 100)
        });
        note("place_attention_forward", e);
    }
    let pass = worst.values().all(|&e| e < 1e-3);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(pass, format!("max relative error over 20 instances each: {detail}"))
}

fn c7_information_preservation() -> Verdict {
    let (mut never_worse, mut strictly_better) = (0, 0);
    for seed in 0..100 {
        let map = thin_structure_map(seed, 64);
        let latent = (8, 8);
        let tcm = TokenClassMap::new(present_classes(&map).into_iter().map(Some).collect());
        let truth = majority_downsample(&map, latent).unwrap();
        let acc = |m: &SemanticMap| m.grid().iter().zip(truth.grid()).filter(|(a, b)| a == b).count();
        let exact = acc(&reconstruct_map(&compute_lcm(&map, latent, &tcm).unwrap(), &tcm));
        let nearest = acc(&reconstruct_map(&nearest_lcm_baseline(&map, latent, &tcm).unwrap(), &tcm));
        never_worse += usize::from(exact >= nearest);
        strictly_better += usize::from(exact > nearest);
    }
    verdict(
        never_worse == 100 && strictly_better >= 50,
        format!("exact ≥ nearest on {never_worse}/100 thin maps, strictly better on {strictly_better}"),
    )
}

// ------------------------------------------------------------ end to end

/// Desk-scale budget for the ablation rows (see README).
/// `PLACE_E2E_SMOKE=1` swaps in a minutes-long budget that only exercises the plumbing.
fn e2e_budget() -> Budget {
    if std::env::var("PLACE_E2E_SMOKE").is_ok_and(|v| v == "1") {
        return Budget { train_steps: 20, n_train: 64, n_lf: 64, n_eval: 8, n_heldout_eval: 8, sample_steps: 4, ..full_budget() };
    }
    full_budget()
}

fn full_budget() -> Budget {
    Budget {
        train_steps: 3000,
        batch_size: 8,
        lf_batch_size: 8,
        lr: 1e-3,
        n_train: 1024,
        n_lf: 1024,
        n_eval: 200,
        n_heldout_eval: 64,
        sample_steps: 20,
        guidance: 2.0,
    }
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct Ablation {
    outcomes: BTreeMap<(u8, u64), VariantOutcome>,
}

impl Ablation {
    fn run(rows: &[u8]) -> Self {
        let budget = e2e_budget();
        let mut outcomes = BTreeMap::new();
        for &seed in &SEEDS {
            let data = ExperimentData::generate(&budget, seed).unwrap();
            for &row in rows {
                let t0 = Instant::now();
                let o = run_variant(row, seed, &budget, &data).unwrap();
                println!(
                    "    row {row} seed {seed}: mIoU {:.4}, held-out mIoU {:.4}, held-out class IoU {:.4}, α(0.1) {:.3}, α(0.9) {:.3} [{:.0}s]",
                    o.held_in.miou,
                    o.heldout.miou,
                    o.heldout_class_iou,
                    o.alpha_t01,
                    o.alpha_t09,
                    t0.elapsed().as_secs_f64()
                );
                outcomes.insert((row, seed), o);
            }
        }
        Self { outcomes }
    }

    fn mean(&self, row: u8, f: impl Fn(&VariantOutcome) -> f64) -> Option<f64> {
        let v: Vec<f64> = SEEDS.iter().filter_map(|s| self.outcomes.get(&(row, *s))).map(&f).collect();
        (v.len() == SEEDS.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn c8_lcm_ablation(ab: &Ablation) -> Verdict {
    let (Some(nearest), Some(exact)) = (ab.mean(1, |o| o.held_in.miou), ab.mean(2, |o| o.held_in.miou)) else {
        return verdict(false, "rows 1 and 2 were not run");
    };
    verdict(exact >= nearest + 0.03, format!("mIoU nearest {nearest:.4} → LCM {exact:.4} (Δ {:+.4}, need ≥ +0.03)", exact - nearest))
}

fn c9_lfp_ablation(ab: &Ablation) -> Verdict {
    let (Some(without), Some(with)) = (ab.mean(5, |o| o.heldout_class_iou), ab.mean(7, |o| o.heldout_class_iou)) else {
        return verdict(false, "rows 5 and 7 were not run");
    };
    verdict(with >= without + 0.02, format!("held-out class IoU without LFP {without:.4} → with {with:.4} (Δ {:+.4}, need ≥ +0.02)", with - without))
}

fn c10_sa_ablation(ab: &Ablation) -> Verdict {
    let (Some(without), Some(with)) = (ab.mean(5, |o| o.held_in.miou), ab.mean(6, |o| o.held_in.miou)) else {
        return verdict(false, "rows 5 and 6 were not run");
    };
    verdict(with >= without - 0.01, format!("mIoU without SA {without:.4} → with {with:.4} (Δ {:+.4}, need ≥ −0.01)", with - without))
}

fn c11_alpha_trend(ab: &Ablation) -> Verdict {
    let runs: Vec<&VariantOutcome> = SEEDS.iter().filter_map(|s| ab.outcomes.get(&(5, *s))).collect();
    if runs.len() != SEEDS.len() {
        return verdict(false, "row 5 was not run");
    }
    let detail = runs.iter().map(|o| format!("seed {}: {:.3} vs {:.3}", o.seed, o.alpha_t09, o.alpha_t01)).collect::<Vec<_>>().join("; ");
    verdict(runs.iter().all(|o| o.alpha_t09 > o.alpha_t01), format!("mean α at t=0.9 vs t=0.1, adaptive-α runs: {detail}"))
}

// ------------------------------------------------------------ determinism

fn place(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_place")).args(args).current_dir(dir).env_remove("PLACE_SEED").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("place {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn c12_determinism() -> Verdict {
    let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let d = dir.path();
        place(&["gen-data", "--out", "data", "--count", "64", "--seed", "7"], d)?;
        place(&["train", "--dataset", "data", "--out", "run", "--variant", "6", "--train-steps", "100", "--seed", "11", "--log-every", "0"], d)?;
        place(&["sample", "--checkpoint", "run/model.ckpt", "--dataset", "data", "--index", "3", "--seed", "5", "--out", "sample"], d)?;
        let read = |p: &str| std::fs::read(d.join(p)).map_err(|e| e.to_string());
        Ok((read("run/model.ckpt")?, read("sample/sample.ppm")?))
    };
    match (run(), run()) {
        (Ok(a), Ok(b)) => verdict(a == b, format!("checkpoint identical: {}, sample identical: {}", a.0 == b.0, a.1 == b.1)),
        (Err(e), _) | (_, Err(e)) => verdict(false, e),
    }
}

// ------------------------------------------------------------ driver

type Criterion<F> = (u32, &'static str, F);

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("PLACE_ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: u32| selected.as_ref().is_none_or(|s| s.contains(&n));
    // `cargo test` passes harness flags such as `--list`; nothing to list here
    if std::env::args().any(|a| a == "--list") {
        return;
    }

    let cheap: [Criterion<fn() -> Verdict>; 8] = [
        (1, "LCM exactness", c1_lcm_exactness),
        (2, "factor-1 identity", c2_factor_one_identity),
        (3, "fusion row-stochasticity", c3_row_stochastic),
        (4, "α=0 / layout-free equivalence", c4_alpha_zero_equivalence),
        (5, "SA loss oracle", c5_sa_oracle),
        (6, "gradient checks", c6_gradients),
        (7, "information preservation", c7_information_preservation),
        (12, "determinism", c12_determinism),
    ];
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    for (n, name, f) in cheap {
        if wanted(n) {
            let v = f();
            println!("criterion {n:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            results.push((n, name, v));
        }
    }

    let e2e: [Criterion<fn(&Ablation) -> Verdict>; 4] = [
        (8, "LCM vs nearest ablation", c8_lcm_ablation),
        (9, "LFP held-out class ablation", c9_lfp_ablation),
        (10, "SA non-inferiority", c10_sa_ablation),
        (11, "α trend", c11_alpha_trend),
    ];
    let mut rows: Vec<u8> = Vec::new();
    for (n, row_set) in [(8, &[1u8, 2][..]), (9, &[5, 7][..]), (10, &[5, 6][..]), (11, &[5][..])] {
        if wanted(n) {
            rows.extend(row_set.iter().filter(|r| !rows.contains(r)).collect::<Vec<_>>());
        }
    }
    if !rows.is_empty() {
        rows.sort_unstable();
        println!("training ablation rows {rows:?} over seeds {SEEDS:?} with {:?}", e2e_budget());
        let ab = Ablation::run(&rows);
        for (n, name, f) in e2e {
            if wanted(n) {
                let v = f(&ab);
                println!("criterion {n:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
                results.push((n, name, v));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for (n, name, v) in &results {
        println!("  {n:>2} {:<4} {name}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
