//! Acceptance checks, one status line per criterion. Runs as a plain binary
//! (`harness = false`) so the lines always reach the test output.
//!
//! Set `LESIONSEG_ISIC_IMAGES` and `LESIONSEG_ISIC_MASKS` to an ISIC-2017
//! style image and mask directory to enable the real-data smoke run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use lesionseg::checkpoint::Checkpoint;
use lesionseg::config::{DataSource, TrainConfig};
use lesionseg::data::{
    load_sample, pair_isic_dir, save_mask_png, save_overlay_png, synth_dataset, AugmentConfig,
};
use lesionseg::fusion::FusionMode;
use lesionseg::loss::{boundary_weight_map, total_loss, LossConfig, BCE_CLAMP, IOU_EPS};
use lesionseg::metrics::{confusion, metric_suite, ConfusionMatrix};
use lesionseg::model::{ModelConfig, SegModel};
use lesionseg::nn::{Ctx, Init, ParamStore};
use lesionseg::rng::RngStream;
use lesionseg::selftest::{self, CheckResult};
use lesionseg::train::{evaluate, mean_dice, Trainer};
use lesionseg::transformer::Msa;
use lesionseg::{Graph, Result, Tensor};

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Self {
        Self {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }
}

/// Folds a list of selftest results into one outcome, listing failures.
fn from_checks(results: &[CheckResult], extra: String) -> Outcome {
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.to_string())
        .collect();
    // shape checks carry a zero tolerance and a 0/1 value; leave them out
    let worst = results
        .iter()
        .filter(|r| r.tolerance > 0.0)
        .map(|r| r.value)
        .fold(0.0, f64::max);
    let detail = if failed.is_empty() {
        format!("{} checks, worst value {worst:.2e}; {extra}", results.len())
    } else {
        format!(
            "{} of {} checks failed: {}; {extra}",
            failed.len(),
            results.len(),
            failed.join(" | ")
        )
    };
    Outcome::check(failed.is_empty(), detail)
}

// ---------------------------------------------------------------------------
// 1. optional real-data smoke run

const SMOKE_IMAGES: usize = 200;
const SMOKE_EPOCHS: usize = 5;
const SMOKE_JACCARD: f64 = 0.55;

/// Toy preset on the first `limit` pairs of an ISIC-layout directory; returns
/// the pooled validation Jaccard after `epochs`.
fn isic_smoke(
    images: &Path,
    masks: &Path,
    limit: usize,
    epochs: usize,
) -> Result<(f64, usize, usize)> {
    let mut cfg = TrainConfig::toy();
    cfg.epochs = epochs;
    cfg.eval_interval = epochs;
    cfg.val_fraction = 0.1;
    cfg.data = DataSource::Isic {
        images: images.to_path_buf(),
        masks: masks.to_path_buf(),
    };
    let (pairs, _) = pair_isic_dir(images, masks)?;
    let mut all = Vec::new();
    for (_, img, mask) in pairs.into_iter().take(limit) {
        all.push(load_sample(&img, &mask, cfg.model.image_size)?);
    }
    let n_val = ((all.len() as f64 * cfg.val_fraction).round() as usize).max(1);
    let val = all.split_off(all.len() - n_val);
    let (n_train, n_val) = (all.len(), val.len());
    let mut trainer = Trainer::with_data(cfg, all, val)?;
    let logs = trainer.run(|_| {})?;
    let j = logs.last().and_then(|l| l.val).map_or(0.0, |v| v.jaccard);
    Ok((j, n_train, n_val))
}

/// Writes synthetic lesions as PNG pairs with ISIC file naming.
fn write_isic_layout(dir: &Path, n: usize) -> Result<(PathBuf, PathBuf)> {
    let (images, masks) = (dir.join("images"), dir.join("masks"));
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    for (i, s) in synth_dataset(n, 7, (96, 128))?.iter().enumerate() {
        let (h, w) = s.size();
        let mut raw = s.image.data().to_vec();
        lesionseg::data::denormalize(&mut raw);
        let none = vec![false; h * w];
        let mask: Vec<bool> = s.mask.data().iter().map(|&v| v > 0.5).collect();
        let stem = format!("ISIC_{:07}", i);
        save_overlay_png(
            &images.join(format!("{stem}.png")),
            &raw,
            &none,
            h,
            w,
            [0, 0, 0],
        )?;
        save_mask_png(&masks.join(format!("{stem}_segmentation.png")), &mask, h, w)?;
    }
    Ok((images, masks))
}

fn criterion_1() -> Result<Outcome> {
    let env = |k| std::env::var_os(k).map(PathBuf::from);
    if let (Some(images), Some(masks)) = (env("LESIONSEG_ISIC_IMAGES"), env("LESIONSEG_ISIC_MASKS"))
    {
        let start = Instant::now();
        let (j, n_train, n_val) = isic_smoke(&images, &masks, SMOKE_IMAGES, SMOKE_EPOCHS)?;
        return Ok(Outcome::check(
            j >= SMOKE_JACCARD,
            format!(
                "ISIC smoke run, {n_train} train / {n_val} val images, {SMOKE_EPOCHS} epochs: val jaccard {j:.4} (need >= {SMOKE_JACCARD}), {:.0} s",
                start.elapsed().as_secs_f64()
            ),
        ));
    }
    // No data supplied: still drive the same loader and training path.
    let dir = tempfile::tempdir()?;
    let (images, masks) = write_isic_layout(dir.path(), 20)?;
    let (j, n_train, n_val) = isic_smoke(&images, &masks, SMOKE_IMAGES, 2)?;
    Ok(Outcome {
        status: Status::Skip,
        detail: format!(
            "no ISIC directory (set LESIONSEG_ISIC_IMAGES and LESIONSEG_ISIC_MASKS); \
             same pipeline on a synthetic ISIC-layout directory ({n_train}+{n_val} images, 2 epochs) ran, val jaccard {j:.3}"
        ),
    })
}

// ---------------------------------------------------------------------------
// 2. gradient suite

fn criterion_2() -> Result<Outcome> {
    let start = Instant::now();
    let mut results = selftest::gradient_suite(2)?;
    results.push(selftest::model_gradient_check(&ModelConfig::toy(), 200, 2)?);
    let secs = start.elapsed().as_secs_f64();
    let mut out = from_checks(&results, format!("{secs:.1} s on one thread (limit 120 s)"));
    if secs >= 120.0 {
        out.status = Status::Fail;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// 3. oracle equivalence

fn criterion_3() -> Result<Outcome> {
    let results = [
        selftest::conv_oracle(50, 3)?,
        selftest::attention_oracle(20, 3)?,
        selftest::metric_oracle(100, 3)?,
    ];
    let detail = results
        .iter()
        .map(|r| format!("{} = {:.1e}", r.name, r.value))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(from_checks(&results, detail))
}

// ---------------------------------------------------------------------------
// 4. structural invariants

/// Worst deviation of MSA(P·X) from P·MSA(X) over random permutations.
fn msa_equivariance(d: usize, heads: usize, n: usize, trials: usize, seed: u64) -> Result<f64> {
    let mut ps = ParamStore::new();
    let mut rng = RngStream::from_seed(seed);
    let msa = Msa::new(&mut Init::new(&mut ps, &mut rng), d, heads);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::randn(&[1, n, d], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let px: Vec<f64> = perm
            .iter()
            .flat_map(|&p| x.data()[p * d..(p + 1) * d].to_vec())
            .collect();
        let px = Tensor::from_vec(&[1, n, d], px)?;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &ps, false);
        let (xv, pv) = (cx.g.constant(&x), cx.g.constant(&px));
        let y = msa.forward(&mut cx, xv)?;
        let yp = msa.forward(&mut cx, pv)?;
        let (y, yp) = (g.value(y), g.value(yp));
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..d {
                worst = worst.max((yp[i * d + k] - y[p * d + k]).abs());
            }
        }
    }
    Ok(worst)
}

/// Worst softmax row-sum error over the attention maps of a toy forward pass.
fn attention_row_sums(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::toy();
    let (model, ps) = SegModel::new(&cfg, &mut RngStream::from_seed(seed))?;
    let (h, w) = cfg.image_size;
    let image = Tensor::randn(&[2, 3, h, w], 1.0, &mut RngStream::from_seed(seed + 1));
    let mut g = Graph::new();
    let x = g.constant(&image);
    let out = model.forward(&mut Ctx::new(&mut g, &ps, true), x)?;
    let mut worst = 0.0f64;
    for &m in &out.transformer.attention_maps {
        let n = *g.shape(m).last().unwrap();
        for row in g.value(m).chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn criterion_4() -> Result<Outcome> {
    let large = ModelConfig::large();
    let eq = msa_equivariance(
        large.transformer.embed_dim,
        large.transformer.heads,
        12,
        3,
        4,
    )?;
    let rows = attention_row_sums(4)?;
    let mut results = vec![
        CheckResult {
            name: "MSA permutation equivariance".into(),
            value: eq,
            tolerance: 1e-9,
            passed: eq <= 1e-9,
        },
        CheckResult {
            name: "softmax row sums".into(),
            value: rows,
            tolerance: 1e-9,
            passed: rows <= 1e-9,
        },
    ];
    results.extend(selftest::shape_audit(&ModelConfig::toy(), 4)?);
    results.extend(selftest::shape_audit(&large, 4)?);
    let (h, w) = large.image_size;
    Ok(from_checks(
        &results,
        format!("equivariance {eq:.1e}, row sums {rows:.1e}, shapes and (0,1) maps at {h}x{w} and 64x64"),
    ))
}

// ---------------------------------------------------------------------------
// 5. metric identities

fn criterion_5() -> Result<Outcome> {
    let mut problems = Vec::new();
    let mut cases = 0;
    let n = 12u64;
    for tp in 0..=n {
        for fp in 0..=n {
            for fn_ in 0..=n {
                for tn in 0..=n {
                    cases += 1;
                    let m = metric_suite(&ConfusionMatrix::new(tp, fp, fn_, tn));
                    if !(-1.0..=1.0).contains(&m.mcc) {
                        problems.push(format!("mcc {} at {tp},{fp},{fn_},{tn}", m.mcc));
                    }
                    if tp + fp + fn_ > 0 {
                        // 2J/(1+J) with J = tp/u reduces to 2tp/(2tp+fp+fn)
                        let exact = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
                        let j = m.jaccard;
                        if m.dice != exact
                            || (m.dice - 2.0 * j / (1.0 + j)).abs() > 4.0 * f64::EPSILON
                        {
                            problems.push(format!(
                                "dice {} vs {exact} at {tp},{fp},{fn_},{tn}",
                                m.dice
                            ));
                        }
                    }
                }
            }
        }
    }

    let gt = synth_dataset(3, 5, (32, 32))?;
    for s in &gt {
        let c = confusion(s.mask.data(), s.mask.data(), 0.5)?;
        let m = metric_suite(&c);
        let all = [
            m.accuracy,
            m.precision,
            m.recall,
            m.sensitivity,
            m.specificity,
            m.f_measure,
            m.jaccard,
            m.mcc,
            m.dice,
        ];
        if all.iter().any(|&v| v != 1.0) {
            problems.push(format!("perfect prediction on {} gave {all:?}", s.id));
        }
    }

    let m = metric_suite(&ConfusionMatrix::new(3, 2, 1, 4));
    if m.specificity != 4.0 / 6.0 {
        problems.push(format!(
            "specificity {} instead of TN/(TN+FP) = 4/6",
            m.specificity
        ));
    }

    Ok(Outcome::check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{cases} confusion matrices, 3 perfect masks, specificity TN/(TN+FP)")
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------------------
// 6 and 7. overfit and fusion lattice

struct OverfitRun {
    first_loss: f64,
    last_loss: f64,
    steps: u64,
    dice: f64,
    mean_dice: f64,
    params: usize,
    all_finite: bool,
    secs: f64,
}

fn overfit(mode: FusionMode) -> Result<OverfitRun> {
    let start = Instant::now();
    let mut cfg = TrainConfig::toy();
    cfg.model = cfg.model.with_fusion_mode(mode);
    let mut t = Trainer::new(cfg)?;
    t.run(|_| {})?;
    let report = evaluate(&t.model, &t.ps, &t.train_set, t.cfg.threshold)?;
    let h = &t.history;
    Ok(OverfitRun {
        first_loss: h[0].loss,
        last_loss: h[h.len() - 1].loss,
        steps: t.step,
        dice: report.aggregate.f_measure,
        mean_dice: mean_dice(&report),
        params: t.ps.num_scalars(),
        all_finite: h
            .iter()
            .all(|r| r.loss.is_finite() && r.grad_norm.is_finite()),
        secs: start.elapsed().as_secs_f64(),
    })
}

fn criterion_6(run: &OverfitRun) -> Outcome {
    let ratio = run.first_loss / run.last_loss;
    let cfg = TrainConfig::toy();
    let n = match cfg.data {
        DataSource::Synthetic { n } => n,
        _ => 0,
    };
    Outcome::check(
        run.steps <= 500 && run.dice >= 0.95 && run.mean_dice >= 0.95 && ratio >= 10.0 && run.secs < 600.0,
        format!(
            "seed {}, n={n}, {} Adam steps: train dice {:.4} (mean per sample {:.4}), loss {:.4} -> {:.4} ({ratio:.1}x), {:.0} s",
            cfg.seed, run.steps, run.dice, run.mean_dice, run.first_loss, run.last_loss, run.secs
        ),
    )
}

fn criterion_7(full: &OverfitRun) -> Result<Outcome> {
    let mut runs = Vec::new();
    for mode in FusionMode::ALL {
        if mode == FusionMode::Full {
            runs.push((mode, None));
        } else {
            runs.push((mode, Some(overfit(mode)?)));
        }
    }
    let get = |r: &Option<OverfitRun>| -> (usize, bool, f64) {
        let r = r.as_ref().unwrap_or(full);
        (r.params, r.all_finite, r.first_loss / r.last_loss)
    };
    let stats: Vec<_> = runs.iter().map(|(m, r)| (*m, get(r))).collect();
    let finite = stats.iter().all(|(_, s)| s.1);
    let increasing = stats.windows(2).all(|w| w[0].1 .0 < w[1].1 .0);
    let detail = stats
        .iter()
        .map(|(m, (p, f, ratio))| {
            format!(
                "{m}: {p} params, {}, loss {ratio:.1}x down",
                if *f { "finite" } else { "NON-FINITE" }
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Outcome::check(finite && increasing, detail))
}

// ---------------------------------------------------------------------------
// 8. determinism and persistence

fn determinism_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.epochs = 6;
    cfg.eval_interval = 3;
    cfg.augment = Some(AugmentConfig {
        seed: cfg.seed,
        ..AugmentConfig::default()
    });
    cfg
}

fn criterion_8() -> Result<Outcome> {
    let mut problems = Vec::new();

    let run = || -> Result<Trainer> {
        let mut t = Trainer::new(determinism_config())?;
        t.run(|_| {})?;
        Ok(t)
    };
    let (a, b) = (run()?, run()?);
    let bytes = a.checkpoint().to_bytes();
    if bytes != b.checkpoint().to_bytes() {
        problems.push("same seed gave different checkpoints".to_string());
    }

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.ckpt");
    a.checkpoint().save(&path)?;
    let on_disk = std::fs::read(&path)?;
    let loaded = Checkpoint::load(&path)?;
    if on_disk != bytes || loaded.to_bytes() != bytes {
        problems.push("checkpoint round trip changed bytes".to_string());
    }

    let mut first = Trainer::new(determinism_config())?;
    for _ in 0..3 {
        first.run_epoch()?;
    }
    let ck = Checkpoint::from_bytes(&first.checkpoint().to_bytes())?;
    let (train, val) = (first.train_set.clone(), first.val_set.clone());
    let mut resumed = Trainer::resume(determinism_config(), &ck, train, val)?;
    resumed.run(|_| {})?;
    let offset = a.history.len() - resumed.history.len();
    let worst = resumed
        .history
        .iter()
        .zip(&a.history[offset..])
        .map(|(r, u)| (r.loss - u.loss).abs())
        .fold(0.0f64, f64::max);
    if resumed.history.is_empty() || worst > 1e-9 {
        problems.push(format!("resumed losses deviate by {worst:.2e}"));
    }
    if resumed.checkpoint().to_bytes() != bytes {
        problems.push("resumed run ended with different weights".to_string());
    }

    Ok(Outcome::check(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{} bytes identical across seeds and disk; resume after epoch 3 matches {} steps, worst loss gap {worst:.1e}",
                bytes.len(),
                resumed.history.len()
            )
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------------------
// 9. loss contract

/// Direct loops over pixels: boundary map, weighted BCE and weighted IoU.
fn reference_boundary(gt: &[f64], h: usize, w: usize, k: usize, lambda: f64) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut s, mut n) = (0.0, 0.0);
            for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                    s += gt[yy as usize * w + xx as usize];
                    n += 1.0;
                }
            }
            out.push(1.0 + lambda * (s / n - gt[y as usize * w + x as usize]).abs());
        }
    }
    out
}

fn reference_head_loss(p: &[f64], gt: &[f64], w: &[f64]) -> f64 {
    let (mut ll, mut sw, mut inter, mut union) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        let q = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        ll += w[i] * (gt[i] * q.ln() + (1.0 - gt[i]) * (1.0 - q).ln());
        sw += w[i];
        inter += w[i] * p[i] * gt[i];
        union += w[i] * (p[i] + gt[i] - p[i] * gt[i]);
    }
    let bce = -ll / sw;
    let iou = 1.0 - (inter + IOU_EPS) / (union + IOU_EPS);
    bce + iou
}

fn criterion_9() -> Result<Outcome> {
    let cfg = LossConfig::large();
    let weights = cfg.weights;
    let mut problems = Vec::new();
    if (weights.alpha, weights.beta, weights.gamma) != (0.5, 0.3, 0.2) {
        problems.push(format!("default weights are {weights:?}"));
    }

    let mut rng = RngStream::from_seed(9);
    let (h, w) = (24, 20);
    let mut worst_total = 0.0f64;
    for trial in 0..10 {
        let masks: Vec<f64> = synth_dataset(2, 90 + trial, (32, 32))?
            .iter()
            .flat_map(|s| {
                // crop to a non-square plane
                let d = s.mask.data();
                (0..h)
                    .flat_map(move |y| (0..w).map(move |x| d[y * 32 + x]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let gt = Tensor::from_vec(&[2, 1, h, w], masks)?;
        let heads: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[2, 1, h, w], 0.0, 1.0, &mut rng))
            .collect();
        let mut g = Graph::new();
        let hv = [
            g.constant(&heads[0]),
            g.constant(&heads[1]),
            g.constant(&heads[2]),
        ];
        let terms = total_loss(&mut g, hv, &gt, &cfg)?;
        let total = g.item(terms.total);

        let wmap: Vec<f64> = gt
            .data()
            .chunks(h * w)
            .flat_map(|plane| {
                reference_boundary(plane, h, w, cfg.boundary_kernel, cfg.boundary_lambda)
            })
            .collect();
        let per_head: Vec<f64> = heads
            .iter()
            .map(|p| reference_head_loss(p.data(), gt.data(), &wmap))
            .collect();
        // fused, transformer and coarse heads carry alpha, gamma and beta
        let hand = 0.5 * per_head[0] + 0.2 * per_head[1] + 0.3 * per_head[2];
        worst_total = worst_total.max((total - hand).abs());
    }
    if worst_total > 1e-12 {
        problems.push(format!(
            "total loss differs from hand sum by {worst_total:.2e}"
        ));
    }

    let mut map_problems = 0;
    let mut maps = 0;
    for (k, lambda) in [(3, 5.0), (5, 5.0), (15, 5.0), (7, 0.5)] {
        for fill in [0.0, 1.0] {
            maps += 1;
            let m = boundary_weight_map(&Tensor::full(&[1, 1, 17, 23], fill), k, lambda)?;
            if m.data().iter().any(|&v| v != 1.0) {
                map_problems += 1;
            }
        }
        for _ in 0..25 {
            maps += 1;
            let p = rng.uniform_range(0.05, 0.95);
            let data = (0..17 * 23)
                .map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 })
                .collect();
            let m = boundary_weight_map(&Tensor::from_vec(&[1, 1, 17, 23], data)?, k, lambda)?;
            if m.data().iter().any(|&v| !(1.0..=1.0 + lambda).contains(&v)) {
                map_problems += 1;
            }
        }
    }
    if map_problems > 0 {
        problems.push(format!(
            "{map_problems} of {maps} boundary maps out of contract"
        ));
    }

    Ok(Outcome::check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("worst gap to hand-combined loss {worst_total:.1e}; {maps} boundary maps within [1, 1+lambda], constants give 1")
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------------------

fn report(n: usize, outcome: Result<Outcome>) -> bool {
    let outcome = outcome.unwrap_or_else(|e| Outcome {
        status: Status::Fail,
        detail: format!("error: {e}"),
    });
    let tag = match outcome.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    println!("criterion {n}: {tag} {}", outcome.detail);
    !matches!(outcome.status, Status::Fail)
}

fn main() -> ExitCode {
    // Runtime limits are stated for a single core.
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global()
        .ok();

    let mut ok = true;
    ok &= report(1, criterion_1());
    ok &= report(2, criterion_2());
    ok &= report(3, criterion_3());
    ok &= report(4, criterion_4());
    ok &= report(5, criterion_5());
    match overfit(FusionMode::Full) {
        Ok(full) => {
            ok &= report(6, Ok(criterion_6(&full)));
            ok &= report(7, criterion_7(&full));
        }
        Err(e) => {
            ok &= report(6, Err(e));
            ok &= report(
                7,
                Err(lesionseg::Error::Numeric("overfit run failed".into())),
            );
        }
    }
    ok &= report(8, criterion_8());
    ok &= report(9, criterion_9());
    if ok {
        println!("acceptance: all criteria met");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED");
        ExitCode::FAILURE
    }
}
