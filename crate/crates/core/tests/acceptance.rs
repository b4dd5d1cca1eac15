//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion fails.
//!
//! Set `MULO_ACCEPTANCE=1,4,8` to run a subset. Meta-training criteria (6, 7)
//! take tens of minutes on one core.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use mulo::baselines::{adam_step, grid_search, AdamHyper, AdamState, GridSpec, RunOutcome};
use mulo::coordcheck::{run_coordcheck, width_ratios, CoordCheckConfig};
use mulo::harness::{mean_se, run_eval, CurveSet, EvalTask};
use mulo::lo::{apply_update, UpdateRuleConfig};
use mulo::optim::{LoadedLo, Optimizer};
use mulo::optimizee::{
    forward, forward_pre_activations, init_mlp, loss_and_grads, Activation, Batch, DatasetSource, MlpSpec, OutputInit, SamplingMode,
    SyntheticConfig,
};
use mulo::parametrization::{update_scale, MultiplierSet, ParamMode};
use mulo::pes::{pes_truncation, MetaProblem, MetaTask, MetaTrainConfig, MetaTrainer, OuterSchedule, Particles, PesConfig, TruncationSchedule};
use mulo::rng::RngStream;
use mulo::tensor::Tensor;
use mulo::Result;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// 1. Backprop vs central finite differences.

fn criterion_1() -> Result<Verdict> {
    const H: f64 = 1e-5;
    // Guards exact-zero gradients (dead units), where both sides are ~0.
    const FLOOR: f64 = 1e-8;
    let mut rng = RngStream::new(2024, 1);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut kinks = 0usize;
    for _ in 0..100 {
        let depth = 2 + rng.below(3);
        let spec = MlpSpec {
            output_init: OutputInit::Sampled,
            multipliers: MultiplierSet {
                input_mult: 0.5 + rng.uniform(),
                output_mult: 0.5 + 2.0 * rng.uniform(),
                hidden_lr_mult: 1.0,
            },
            ..MlpSpec::new(
                2 + rng.below(5),
                2 + rng.below(7),
                depth,
                2 + rng.below(4),
                if rng.below(2) == 0 { ParamMode::Sp } else { ParamMode::Mup },
            )
        };
        let params = init_mlp(&spec, &mut rng)?;
        let n = 1 + rng.below(8);
        let x = Tensor::gaussian(n, spec.input_dim, 0.0, 1.0, &mut rng)?;
        let y = (0..n).map(|_| rng.below(spec.num_classes) as u32).collect();
        let batch = Batch { x, y };
        let (_, grads) = loss_and_grads(&params, &batch)?;
        let pattern = |p: &mulo::optimizee::OptimizeeParams| -> Result<Vec<bool>> {
            let (_, pre) = forward_pre_activations(p, &batch.x)?;
            Ok(pre[..pre.len() - 1].iter().flat_map(|h| h.data().iter().map(|v| *v > 0.0)).collect())
        };
        let base = pattern(&params)?;
        for t in 0..params.tensors.len() {
            for i in 0..params.tensors[t].value.len() {
                let mut p = params.clone();
                let w = p.tensors[t].value.data()[i];
                p.tensors[t].value.data_mut()[i] = w + H;
                let up = forward(&p, &batch)?.loss;
                let up_pattern = pattern(&p)?;
                p.tensors[t].value.data_mut()[i] = w - H;
                let down = forward(&p, &batch)?.loss;
                // A ReLU switching inside [w - h, w + h] makes the central
                // difference straddle a kink; no derivative oracle exists there.
                if up_pattern != base || pattern(&p)? != base {
                    kinks += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * H);
                let analytic = grads.tensors[t].data()[i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    Ok(verdict(worst < 1e-5, format!("max relative error {worst:.2e} over {checked} entries of 100 nets (< 1e-5), {kinks} kink-straddling entries excluded")))
}

// ---------------------------------------------------------------------------
// 2. PES unbiasedness on L(φ) = ‖φ‖²/2.

struct Quadratic;

impl MetaProblem for Quadratic {
    type Prepared = Vec<f64>;
    type State = ();
    fn dim(&self) -> usize {
        5
    }
    fn prepare(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(theta.to_vec())
    }
    fn reset(&self, _: &mut RngStream) -> Result<()> {
        Ok(())
    }
    fn loss_cap(&self, _: &()) -> f64 {
        f64::INFINITY
    }
    fn step(&self, p: &Vec<f64>, _: &mut ()) -> Option<f64> {
        Some(0.5 * p.iter().map(|x| x * x).sum::<f64>())
    }
}

fn criterion_2() -> Result<Verdict> {
    let theta = [0.8, -0.3, 1.5, -2.0, 0.05];
    let cfg = PesConfig { num_pairs: 1, sigma: 0.01, truncation: 1, horizon: 1, ..PesConfig::default() };
    let mut particles = Particles::new(&Quadratic, &cfg, &RngStream::new(7, 2))?;
    let n = 100_000;
    let mut samples = vec![Vec::with_capacity(n); 5];
    for _ in 0..n {
        let est = pes_truncation(&Quadratic, &theta, &mut particles, &cfg, 1)?;
        for (s, g) in samples.iter_mut().zip(&est.grad) {
            s.push(*g);
        }
    }
    let mut worst_z: f64 = 0.0;
    for (s, t) in samples.iter().zip(theta) {
        let (mean, se) = mean_se(s);
        worst_z = worst_z.max((mean - t).abs() / se.unwrap());
    }
    Ok(verdict(worst_z <= 3.0, format!("max |z| = {worst_z:.2} over 5 coordinates, 1e5 estimates (<= 3)")))
}

// ---------------------------------------------------------------------------
// 3. Hidden-layer update magnitude scaling.

fn criterion_3() -> Result<Verdict> {
    let rule = UpdateRuleConfig::default();
    let k = 1000;
    let mut rng = RngStream::new(3, 3);
    let m: Vec<f64> = (0..k).map(|_| 50.0 * rng.normal()).collect();
    let d: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    let mut worst_mup: f64 = 0.0;
    let mut worst_sp: f64 = 0.0;
    let mut reference: [Option<Vec<f64>>; 2] = [None, None];
    for width in [128usize, 512, 2048] {
        for (slot, mode) in [ParamMode::Mup, ParamMode::Sp].into_iter().enumerate() {
            let params = init_mlp(&MlpSpec::new(64, width, 3, 10, mode), &mut RngStream::new(0, 0))?;
            let hidden = params.weight(1);
            let scale = update_scale(hidden.role, hidden.geom, mode);
            // Start from zero so w' - w is the update itself, free of cancellation.
            let mut w = vec![0.0; k];
            apply_update(&mut w, &m, &d, &rule, scale)?;
            let normalized: Vec<f64> = w
                .iter()
                .map(|x| if mode == ParamMode::Mup { x.abs() * hidden.geom.fan_in as f64 } else { x.abs() })
                .collect();
            match &reference[slot] {
                None => reference[slot] = Some(normalized),
                Some(r) => {
                    let worst = r
                        .iter()
                        .zip(&normalized)
                        .map(|(a, b)| (a - b).abs() / a.abs().max(f64::MIN_POSITIVE))
                        .fold(0.0, f64::max);
                    if mode == ParamMode::Mup {
                        worst_mup = worst_mup.max(worst);
                    } else {
                        worst_sp = worst_sp.max(worst);
                    }
                }
            }
        }
    }
    Ok(verdict(
        worst_mup <= 1e-12 && worst_sp <= 1e-12,
        format!("µP |Δw|·fan_in rel. spread {worst_mup:.1e}, SP |Δw| rel. spread {worst_sp:.1e} over widths 128/512/2048 (<= 1e-12)"),
    ))
}

// ---------------------------------------------------------------------------
// 4. Adam against an independent reference trajectory.

fn criterion_4() -> Result<Verdict> {
    #[derive(serde::Deserialize)]
    struct Golden {
        sp: Vec<Vec<f64>>,
        mup: Vec<Vec<f64>>,
    }
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/adam_golden.json");
    let golden: Golden = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut worst: f64 = 0.0;
    for (mode, expected) in [(ParamMode::Sp, &golden.sp), (ParamMode::Mup, &golden.mup)] {
        let mut params = init_mlp(&MlpSpec::new(3, 8, 3, 2, mode), &mut RngStream::new(0, 0))?;
        for (t, p) in params.tensors.iter_mut().enumerate() {
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                *w = 0.5 * (1.7 * i as f64 + t as f64).sin();
            }
        }
        let hp = AdamHyper { multipliers: MultiplierSet { hidden_lr_mult: 4.0, ..Default::default() }, ..AdamHyper::new(0.01) };
        let mut state = AdamState::new(&params);
        for _ in 0..10 {
            let mut grads = params.zeros_like();
            for (g, p) in grads.tensors.iter_mut().zip(&params.tensors) {
                for (i, (gi, w)) in g.data_mut().iter_mut().zip(p.value.data()).enumerate() {
                    *gi = (1.0 + (i % 5) as f64) * (w - 0.1 * (i as f64).cos());
                }
            }
            adam_step(&mut state, &mut params, &grads, &hp)?;
        }
        for (p, e) in params.tensors.iter().zip(expected) {
            for (w, x) in p.value.data().iter().zip(e) {
                worst = worst.max((w - x).abs());
            }
        }
    }
    Ok(verdict(worst <= 1e-10, format!("max |Δ| vs reference after 10 steps (SP and µP) = {worst:.1e} (<= 1e-10)")))
}

// ---------------------------------------------------------------------------
// Shared desk-scale task: Gaussian-mixture classification, 64 inputs, 10 classes.

fn desk_data() -> DatasetSource {
    DatasetSource::Synthetic(SyntheticConfig::new(8192, 64, 10, 0))
}

// 5. Coordinate check across widths.

fn criterion_5() -> Result<Verdict> {
    let mu_hp = AdamHyper {
        multipliers: MultiplierSet { input_mult: 0.0625, output_mult: 0.25, hidden_lr_mult: 4.0 },
        ..AdamHyper::new(0.1)
    };
    let optimizers = [
        Optimizer::adam("mu_adam", mu_hp, ParamMode::Mup),
        Optimizer::adam("sp_adam", AdamHyper::new(0.1), ParamMode::Sp),
    ];
    let cfg = CoordCheckConfig {
        optimizers: vec![],
        widths: vec![64, 256, 1024],
        depth: 3,
        steps: 500,
        seeds: vec![0, 1, 2],
        batch_size: 64,
        data: desk_data(),
        log_every: 10,
        probe_batch_size: 256,
        activation: Activation::Relu,
    };
    let ds = cfg.data.load()?;
    let records = run_coordcheck(&cfg, &ds, &optimizers)?;
    let mu = width_ratios(&records, "mu_adam");
    let sp = width_ratios(&records, "sp_adam");
    let mu_max = mu.values().cloned().fold(0.0, f64::max);
    let sp_max = sp.values().cloned().fold(0.0, f64::max);
    let fmt = |r: &std::collections::BTreeMap<usize, f64>| {
        r.iter().map(|(l, v)| format!("L{l}={v:.2}")).collect::<Vec<_>>().join(" ")
    };
    Ok(verdict(
        mu_max <= 10.0 && sp_max > 10.0,
        format!("widest/narrowest max std, µAdam [{}] (all <= 10), SP Adam [{}] (max > 10)", fmt(&mu), fmt(&sp)),
    ))
}

// ---------------------------------------------------------------------------
// 6 and 7. Meta-trained optimizers.

fn meta_config(mode: ParamMode) -> MetaTrainConfig {
    let task = |width| MetaTask { width, depth: 3, batch_size: 64, data: desk_data(), activation: Activation::Relu };
    MetaTrainConfig {
        mode,
        tasks: vec![task(32), task(64)],
        pes: PesConfig {
            num_pairs: 4,
            sigma: 0.01,
            truncation: 20,
            horizon: 200,
            schedule: TruncationSchedule::Fixed,
            ..PesConfig::default()
        },
        schedule: OuterSchedule { total_steps: 1000, ..OuterSchedule::default() },
        features: Default::default(),
        update_rule: UpdateRuleConfig::default(),
        seed: 0,
        checkpoint_every: 0,
        record_wall_time: false,
    }
}

fn meta_train(mode: ParamMode) -> Result<LoadedLo> {
    let mut trainer = MetaTrainer::new(meta_config(mode))?;
    let mut first = None;
    let mut last = 0.0;
    while !trainer.done() {
        let row = trainer.step()?;
        first.get_or_insert(row.mean_inner_loss);
        last = row.mean_inner_loss;
    }
    println!("    meta-trained {mode} LO: mean inner loss {:.4} -> {:.4}", first.unwrap(), last);
    Ok(LoadedLo { phi: Arc::new(trainer.phi()), meta: trainer.checkpoint_meta() })
}

fn trained(mode: ParamMode) -> Result<LoadedLo> {
    static MU: OnceLock<LoadedLo> = OnceLock::new();
    static SP: OnceLock<LoadedLo> = OnceLock::new();
    let cell = if mode == ParamMode::Mup { &MU } else { &SP };
    if let Some(lo) = cell.get() {
        return Ok(lo.clone());
    }
    let lo = meta_train(mode)?;
    Ok(cell.get_or_init(|| lo).clone())
}

fn eval_task(id: &str, width: usize, steps: usize) -> EvalTask {
    EvalTask {
        id: id.into(),
        width,
        depth: 3,
        batch_size: 64,
        steps,
        seeds: vec![0, 1, 2, 3, 4],
        data: desk_data(),
        init_seed: None,
        eval_seed: 0,
        eval_batch_size: 256,
        activation: Activation::Relu,
        sampling: SamplingMode::WithReplacement,
    }
}

fn describe(set: &CurveSet) -> String {
    let (mean, se) = mean_se(&set.final_losses());
    format!("{} {:.4} ± {:.4} ({} diverged)", set.optimizer, mean, se.unwrap_or(0.0), set.diverged_seeds())
}

fn criterion_6() -> Result<Verdict> {
    let mu = Optimizer::learned("mu_lo", trained(ParamMode::Mup)?);
    let sp = Optimizer::learned("sp_lo", trained(ParamMode::Sp)?);
    let task = eval_task("width512", 512, 1000);
    let ds = task.data.load()?;
    let mu_set = run_eval(&task, &ds, &mu)?;
    let sp_set = run_eval(&task, &ds, &sp)?;
    let (mu_mean, _) = mean_se(&mu_set.final_losses());
    let (sp_mean, _) = mean_se(&sp_set.final_losses());
    Ok(verdict(
        mu_mean < sp_mean && mu_set.diverged_seeds() <= sp_set.diverged_seeds(),
        format!("width 512, 1000 steps, 5 seeds: {} vs {}", describe(&mu_set), describe(&sp_set)),
    ))
}

fn criterion_7() -> Result<Verdict> {
    let mu = Optimizer::learned("mu_lo", trained(ParamMode::Mup)?);
    let horizon = meta_config(ParamMode::Mup).pes.horizon;
    let task = eval_task("horizon", 64, 25 * horizon);
    let ds = task.data.load()?;
    let set = run_eval(&task, &ds, &mu)?;
    let means: Vec<f64> = set.summary().iter().map(|s| s.mean).collect();
    let decile = means.len() / 10;
    let first = means[..decile].iter().sum::<f64>() / decile as f64;
    let last = means[means.len() - decile..].iter().sum::<f64>() / decile as f64;
    let finite = set.diverged_seeds() == 0 && means.iter().all(|m| m.is_finite());
    Ok(verdict(
        finite && last <= first,
        format!(
            "µLO at width 64 for {} steps: first-decile mean {first:.4}, last-decile mean {last:.4}, {} diverged",
            task.steps,
            set.diverged_seeds()
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. Grid-search contract.

fn criterion_8() -> Result<Verdict> {
    let grid = GridSpec::default();
    let count = grid.configs().len();
    // f(w) = a w² / 2 trained by SGD from w = 1; the best fixed lr is 1/a = 0.012.
    let a = 1.0 / 0.012;
    let steps = 20;
    let result = grid_search(&grid, &[0, 1, 2], |c, _seed| {
        let mut w = 1.0f64;
        let initial = 0.5 * a * w * w;
        for _ in 0..steps {
            w -= c.lr * a * w;
        }
        let loss = 0.5 * a * w * w;
        let diverged = !(loss <= 100.0 * initial);
        Ok(RunOutcome { final_loss: if diverged { 100.0 * initial } else { loss }, diverged })
    })?;
    let picked = result.best().config.lr;
    let nearest = grid
        .lrs
        .iter()
        .cloned()
        .min_by(|x, y| (x - 1.0 / a).abs().total_cmp(&(y - 1.0 / a).abs()))
        .unwrap();
    let mut csv = Vec::new();
    result.write_csv_to(&mut csv)?;
    let rows = String::from_utf8_lossy(&csv).lines().count() - 1;
    Ok(verdict(
        count == 500 && rows == 500 * 3 && picked == nearest,
        format!("{count} configs ({rows} CSV rows for 3 seeds); picked lr {picked}, nearest to optimum 0.012 is {nearest}"),
    ))
}

// ---------------------------------------------------------------------------
// 9. CLI determinism.

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn mulo(args: &[&str]) -> std::result::Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mulo")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("mulo {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn run_all_commands(dir: &Path) -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let data = dir.join("data.mlod");
    mulo(&["make-dataset", "--n", "512", "--input-dim", "8", "--num-classes", "4", "--seed", "3", "--out", &s(&data)])?;
    let data_json = format!(r#"{{"source": "file", "path": "{}"}}"#, s(&data));

    let meta = dir.join("meta.json");
    write(&meta, &format!(
        r#"{{"mode": "mup",
            "tasks": [{{"width": 8, "depth": 3, "batch_size": 16, "data": {data_json}}}],
            "pes": {{"num_pairs": 2, "sigma": 0.01, "truncation": 3, "horizon": 6,
                     "loss_cap_multiplier": 100.0, "schedule": {{"kind": "fixed"}}}},
            "schedule": {{"max_lr": 0.003, "warmup_steps": 2, "total_steps": 5, "final_lr": 0.001,
                          "clip_norm": 1.0, "weight_decay": 0.0001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}},
            "checkpoint_every": 2}}"#
    )).map_err(|e| e.to_string())?;
    let meta_out = dir.join("meta");
    mulo(&["meta-train", "--config", &s(&meta), "--seed", "4", "--out-dir", &s(&meta_out)])?;
    let ckpt = meta_out.join("phi.mulo");
    let inspect = mulo(&["inspect-checkpoint", &s(&ckpt)])?;

    let lo = format!(r#"{{"kind": "learned", "name": "mu_lo", "checkpoint": "{}"}}"#, s(&ckpt));
    let adam = r#"{"kind": "adam", "name": "mu_adam", "mode": "mup", "lr": 0.01,
                   "multipliers": {"input_mult": 1.0, "output_mult": 1.0, "hidden_lr_mult": 2.0}}"#;
    let eval = dir.join("eval.json");
    write(&eval, &format!(
        r#"{{"tasks": [{{"id": "t", "width": 16, "depth": 3, "batch_size": 16, "steps": 12,
                        "seeds": [0, 1], "data": {data_json}, "eval_batch_size": 32}}],
            "optimizers": [{lo}, {adam}]}}"#
    )).map_err(|e| e.to_string())?;
    mulo(&["evaluate", "--config", &s(&eval), "--out-dir", &s(&dir.join("eval"))])?;

    let sweep = dir.join("sweep.json");
    write(&sweep, &format!(
        r#"{{"widths": [8, 16], "depths": [3], "steps": [6], "seeds": [0, 1], "batch_size": 8,
            "data": {data_json}, "eval_batch_size": 32,
            "optimizers": [{lo}, {{"kind": "sgd", "name": "sgd", "lr": 0.1}}]}}"#
    )).map_err(|e| e.to_string())?;
    mulo(&["sweep", "--config", &s(&sweep), "--out-dir", &s(&dir.join("sweep"))])?;

    let cc = dir.join("cc.json");
    write(&cc, &format!(
        r#"{{"optimizers": [{adam}], "widths": [8, 16], "steps": 20, "seeds": [0], "batch_size": 8,
            "data": {data_json}, "probe_batch_size": 32}}"#
    )).map_err(|e| e.to_string())?;
    mulo(&["coordcheck", "--config", &s(&cc), "--out-dir", &s(&dir.join("cc"))])?;

    let tune = dir.join("tune.json");
    write(&tune, &format!(
        r#"{{"mode": "mup",
            "task": {{"id": "tune", "width": 8, "depth": 3, "batch_size": 8, "steps": 5, "seeds": [0, 1],
                      "data": {data_json}, "eval_batch_size": 16}},
            "grid": {{"lrs": [0.1, 0.01], "input_mults": [0.25, 1.0], "output_mults": [1.0, 4.0],
                      "hidden_lr_mults": [1.0]}}}}"#
    )).map_err(|e| e.to_string())?;
    mulo(&["tune-adam", "--config", &s(&tune), "--out-dir", &s(&dir.join("tune"))])?;

    let read = |p: PathBuf| std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
    Ok(vec![
        ("data.mlod".into(), read(data.clone())?),
        ("meta_train_log.csv".into(), read(meta_out.join("meta_train_log.csv"))?),
        ("phi.mulo".into(), read(ckpt.clone())?),
        ("inspect-checkpoint stdout".into(), inspect),
        ("eval curves.csv".into(), read(dir.join("eval/curves.csv"))?),
        ("eval summary.csv".into(), read(dir.join("eval/summary.csv"))?),
        ("sweep curves.csv".into(), read(dir.join("sweep/curves.csv"))?),
        ("coordcheck.csv".into(), read(dir.join("cc/coordcheck.csv"))?),
        ("grid.csv".into(), read(dir.join("tune/grid.csv"))?),
    ])
}

fn criterion_9() -> Result<Verdict> {
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let (ra, rb) = match (run_all_commands(a.path()), run_all_commands(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return Ok(verdict(false, e)),
    };
    let mut differing = Vec::new();
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        // The inspect output embeds no paths, so it must match as well.
        if x != y || x.is_empty() {
            differing.push(name.clone());
        }
    }
    Ok(verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} outputs of all 7 subcommands byte-identical across two runs", ra.len())
        } else {
            format!("differing or empty outputs: {}", differing.join(", "))
        },
    ))
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("MULO_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Result<Verdict>); 9] = [
        (1, "backprop matches finite differences", criterion_1),
        (2, "PES estimates are unbiased", criterion_2),
        (3, "hidden update scaling across widths", criterion_3),
        (4, "Adam matches reference implementation", criterion_4),
        (5, "coordinate check across widths", criterion_5),
        (6, "µLO generalizes to wider networks than SP LO", criterion_6),
        (7, "µLO horizon generalization", criterion_7),
        (8, "grid search contract", criterion_8),
        (9, "CLI determinism", criterion_9),
    ];
    let mut failures = 0;
    for (id, name, f) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        if !v.pass {
            failures += 1;
        }
        println!(
            "criterion {id} {} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
