use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mmlstm_core::checkpoint::{load_checkpoint, save_checkpoint};
use mmlstm_core::dataset::{
    balanced_test_set, load_pool, load_scenes, save_pool, save_scenes, write_atomic, Pool, SynthConfig, SynthWorld,
};
use mmlstm_core::evaluator::{roc_area, roc_sweep, scene_decisions, score_scenes, shuffled_chance, small_windows_in};
use mmlstm_core::numeric::Rng;
use mmlstm_core::trainer::{random_case, Architecture, GradCheckCase};
use mmlstm_core::{train_model, Model};
use serde::Serialize;

use crate::error::CliError;
use crate::{EvalRocArgs, EvalScenesArgs, GlobalsRef, GradcheckArgs, PredictArgs, SynthArgs, TrainArgs};

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Salt separating the scene stream from pool generation.
const SCENE_SALT: u64 = 0x5ce_4e5;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Output {
        path: dir.display().to_string(),
        message: e.to_string(),
    })
}

fn parent_dir(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn json_lines<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("report serializes") + "\n")
        .collect()
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string()
}

fn pool_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.pool"))
}

fn read_synth(data: &Path) -> Result<Option<SynthConfig>, CliError> {
    let path = data.join("synth.toml");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| mmlstm_core::Error::Io { path: path.clone(), source: e })?;
    toml::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn print_counts(name: &str, pool: &Pool) {
    for s in 0..pool.modality_count() {
        let counts: Vec<String> = pool
            .class_counts(s)
            .into_iter()
            .map(|(k, n)| format!("{k}:{n}"))
            .collect();
        println!("{name:<5} modality {s}  {}", counts.join(" "));
    }
}

pub fn synth(g: GlobalsRef, a: SynthArgs) -> Result<(), CliError> {
    let cfg = &mut g.config;
    if let Some(seed) = a.seed {
        cfg.synth.seed = seed;
    }
    if let Some(k) = a.classes {
        cfg.synth.classes = k;
    }
    if let Some(n) = a.train_per_class {
        cfg.synth.train_per_class = n;
    }
    if let Some(n) = a.test_per_class {
        cfg.synth.test_per_class = n;
    }
    if let Some(n) = a.scenes {
        cfg.scenes.count = n;
    }
    cfg.validate()?;
    let world = SynthWorld::new(cfg.synth.clone())?;
    let (train, test) = world.generate()?;
    let scenes = match a.scenes {
        Some(_) => {
            let sc = &cfg.scenes;
            let mut rng = Rng::new(cfg.synth.seed ^ SCENE_SALT);
            Some(world.scenes(sc.count, sc.windows, sc.absent_rate, sc.max_distractors, &mut rng)?)
        }
        None => None,
    };
    create_dir(&a.out)?;
    save_pool(&a.out, "train", &train)?;
    save_pool(&a.out, "test", &test)?;
    let text = toml::to_string(&cfg.synth).map_err(|e| CliError::Config(e.to_string()))?;
    write_atomic(&a.out.join("synth.toml"), text.as_bytes())?;
    print_counts("train", &train);
    print_counts("test", &test);
    if let Some(scenes) = scenes {
        let path = save_scenes(&a.out, "scenes", &scenes)?;
        let absent = scenes.iter().filter(|s| !s.speaker_present()).count();
        println!("scenes {}  speaker absent {absent}  -> {}", scenes.len(), path.display());
    }
    Ok(())
}

fn metrics_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics.jsonl");
    ckpt.with_file_name(name)
}

pub fn train(g: GlobalsRef, a: TrainArgs) -> Result<(), CliError> {
    let cfg = &mut g.config.train;
    if let Some(v) = a.variant {
        cfg.arch = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.optim.lr = lr;
    }
    if let Some(d) = a.d_h {
        cfg.d_h = d;
    }
    if let Some(n) = a.epoch_size {
        cfg.epoch_size = Some(n);
    }
    if let Some(m) = a.modality {
        cfg.modality = m;
    }
    g.config.validate()?;
    let cfg = &g.config.train;
    let synth = read_synth(&a.data)?;
    let train_pool = load_pool(&pool_path(&a.data, "train"))?;
    let test_file = pool_path(&a.data, "test");
    let test_pool = if test_file.exists() { Some(load_pool(&test_file)?) } else { None };
    let model = Model::init(cfg, &train_pool.dims(), train_pool.class_count())?;
    println!(
        "training {} (d_x {:?}, d_h {}, {} classes, {} parameters)",
        cfg.arch,
        model.d_x(),
        model.d_h(),
        model.classes(),
        model.param_count()
    );

    parent_dir(&a.out)?;
    let log_path = metrics_path(&a.out);
    let mut log = File::create(&log_path).map_err(|e| mmlstm_core::Error::Io { path: log_path.clone(), source: e })?;
    let (model, _) = train_model(model, &train_pool, test_pool.as_ref(), cfg, |m| {
        log.write_all(m.to_json_line().as_bytes())
            .and_then(|_| log.flush())
            .map_err(|e| mmlstm_core::Error::Io { path: log_path.clone(), source: e })?;
        match m.accuracy {
            Some(acc) => println!("epoch {:>3}  loss {:.6}  accuracy {:.4}", m.epoch, m.loss, acc),
            None => println!("epoch {:>3}  loss {:.6}", m.epoch, m.loss),
        }
        Ok(())
    })?;
    save_checkpoint(&a.out, &model, cfg.seed, Some(cfg), synth.as_ref())?;
    println!("checkpoint {}", a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradCheckLine<'a> {
    index: usize,
    modalities: usize,
    #[serde(flatten)]
    case: &'a GradCheckCase,
}

pub fn gradcheck(g: GlobalsRef, a: GradcheckArgs) -> Result<(), CliError> {
    if a.configs == 0 {
        return Err(CliError::Config("configs must be positive".into()));
    }
    if !(a.eps > 0.0) || !a.eps.is_finite() {
        return Err(CliError::Config(format!("eps must be positive, got {}", a.eps)));
    }
    let archs = match a.variant {
        Some(v) => vec![v],
        None => vec![Architecture::Single, Architecture::Full, Architecture::Half, Architecture::None],
    };
    let corrupt = a.corrupt.then_some(0.01);
    let mut rng = Rng::new(a.seed);
    let mut report = String::new();
    let mut worst: Option<GradCheckCase> = None;
    for arch in archs {
        let mut runs: Vec<(usize, GradCheckCase)> = Vec::with_capacity(a.configs + 1);
        for _ in 0..a.configs {
            runs.push((2, random_case(arch, 2, &mut rng, a.eps, corrupt)?));
        }
        if arch.variant().is_some() {
            runs.push((3, random_case(arch, 3, &mut rng, a.eps, corrupt)?));
        }
        let arch_worst = runs
            .iter()
            .map(|(_, c)| c)
            .max_by(|x, y| x.report.max_rel_error.total_cmp(&y.report.max_rel_error))
            .expect("at least one case")
            .clone();
        let r = &arch_worst.report;
        println!(
            "{:<7} cases {:>3}  max rel error {:.3e}  worst {}[{},{}] analytic {:.6e} numeric {:.6e}  {}",
            arch.tag(),
            runs.len(),
            r.max_rel_error,
            r.tensor,
            r.row,
            r.col,
            r.analytic,
            r.numeric,
            if r.max_rel_error < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" }
        );
        for (i, (n, c)) in runs.iter().enumerate() {
            report.push_str(&json_lines(&[GradCheckLine {
                index: i,
                modalities: *n,
                case: c,
            }]));
        }
        if worst.as_ref().is_none_or(|w| r.max_rel_error > w.report.max_rel_error) {
            worst = Some(arch_worst);
        }
    }
    create_dir(&g.report_dir)?;
    write_atomic(&g.report_dir.join("gradcheck.jsonl"), report.as_bytes())?;
    let w = worst.expect("at least one architecture");
    let r = &w.report;
    if r.max_rel_error < GRADCHECK_TOLERANCE {
        println!("max relative error {:.3e} < {GRADCHECK_TOLERANCE:e}", r.max_rel_error);
        Ok(())
    } else {
        Err(CliError::GradCheck(format!(
            "{} {}[{},{}] relative error {:.3e} (analytic {:.6e}, numeric {:.6e})",
            w.arch, r.tensor, r.row, r.col, r.max_rel_error, r.analytic, r.numeric
        )))
    }
}

pub fn eval_roc(g: GlobalsRef, a: EvalRocArgs) -> Result<(), CliError> {
    let ev = &mut g.config.eval;
    if let Some(ms) = a.m_list {
        ev.m_list = Some(ms);
    }
    if let Some(n) = a.per_kind {
        ev.per_kind = n;
    }
    if let Some(s) = a.seed {
        ev.seed = s;
    }
    ev.validate()?;
    let ev = &g.config.eval;
    let (model, _) = load_checkpoint(&a.model)?;
    let params = model.as_multimodal()?;
    let test = load_pool(&pool_path(&a.data, "test"))?;
    let samples = balanced_test_set(&test, ev.per_kind, &mut Rng::new(ev.seed))?;
    let steps = samples[0].steps();
    let ms = ev.m_list.clone().unwrap_or_else(|| (0..=steps).collect());
    if let Some(&bad) = ms.iter().find(|&&m| m > steps) {
        return Err(CliError::Config(format!("m = {bad} exceeds the sequence length {steps}")));
    }
    let points = roc_sweep(params, &samples, &ms, ev.roc_options())?;
    let area = roc_area(&points);

    let mut table = String::from("m\tfar\taccuracy\tgenuine_rejection\tdistractor_acceptance\n");
    for p in &points {
        writeln!(
            table,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            p.m, p.false_alarm_rate, p.accuracy, p.genuine_rejection_rate, p.distractor_acceptance_rate
        )
        .expect("string write");
    }
    println!("{:>4}  {:>8}  {:>8}", "m", "FAR", "accuracy");
    for p in &points {
        println!("{:>4}  {:>8.4}  {:>8.4}", p.m, p.false_alarm_rate, p.accuracy);
    }
    println!("area {area:.6}  ({} genuine + {} distractors)", ev.per_kind, ev.per_kind);

    create_dir(&g.report_dir)?;
    let name = stem(&a.model);
    write_atomic(&g.report_dir.join(format!("{name}.roc.jsonl")), json_lines(&points).as_bytes())?;
    write_atomic(&g.report_dir.join(format!("{name}.roc.tsv")), table.as_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SceneLine {
    model: String,
    vote_secs: f64,
    windows: usize,
    accuracy: f64,
    successes: usize,
    scenes: usize,
    trivial: usize,
}

pub fn eval_scenes(g: GlobalsRef, a: EvalScenesArgs) -> Result<(), CliError> {
    let ev = &mut g.config.eval;
    if let Some(m) = a.m {
        ev.scene_m = m;
    }
    if let Some(w) = a.vote_window {
        ev.vote_windows = w;
    }
    if let Some(s) = a.seed {
        ev.seed = s;
    }
    ev.validate()?;
    let ev = &g.config.eval;
    let windows: Vec<usize> = ev
        .vote_windows
        .iter()
        .map(|&w| small_windows_in(w))
        .collect::<Result<_, _>>()?;
    let scenes = load_scenes(&a.scenes)?;
    let mut models = Vec::with_capacity(a.model.len());
    for path in &a.model {
        let (model, _) = load_checkpoint(path)?;
        model.as_multimodal()?;
        models.push((stem(path), model));
    }

    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    let mut lines = Vec::new();
    let mut chance = Vec::with_capacity(windows.len());
    for (i, (name, model)) in models.iter().enumerate() {
        let decisions = scene_decisions(model.as_multimodal()?, &scenes, ev.scene_m)?;
        let mut accs = Vec::with_capacity(windows.len());
        for (&w, &secs) in windows.iter().zip(&ev.vote_windows) {
            let r = score_scenes(&scenes, &decisions, w)?;
            accs.push(r.accuracy);
            lines.push(SceneLine {
                model: name.clone(),
                vote_secs: secs,
                windows: w,
                accuracy: r.accuracy,
                successes: r.successes,
                scenes: r.scenes,
                trivial: r.trivial,
            });
            if i == 0 {
                let mut rng = Rng::new(ev.seed);
                chance.push(shuffled_chance(&scenes, &decisions, w, ev.chance_rounds, &mut rng)?);
            }
        }
        rows.push((name.clone(), accs));
    }
    for (&secs, &acc) in ev.vote_windows.iter().zip(&chance) {
        lines.push(SceneLine {
            model: "chance".into(),
            vote_secs: secs,
            windows: small_windows_in(secs)?,
            accuracy: acc,
            successes: 0,
            scenes: scenes.len(),
            trivial: 0,
        });
    }
    rows.push(("chance".into(), chance));

    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut header = format!("{:<width$}", "model");
    let mut tsv = String::from("model");
    for secs in &ev.vote_windows {
        write!(header, "  {:>6}", format!("{secs:.1}s")).expect("string write");
        write!(tsv, "\t{secs:.1}s").expect("string write");
    }
    tsv.push('\n');
    println!("{header}");
    for (name, accs) in &rows {
        let mut line = format!("{name:<width$}");
        tsv.push_str(name);
        for acc in accs {
            write!(line, "  {:>6.2}", 100.0 * acc).expect("string write");
            write!(tsv, "\t{acc:.6}").expect("string write");
        }
        tsv.push('\n');
        println!("{line}");
    }
    println!("{} scenes, m = {}, chance from shuffled '{}' decisions", scenes.len(), ev.scene_m, rows[0].0);

    create_dir(&g.report_dir)?;
    write_atomic(&g.report_dir.join("scenes.jsonl"), json_lines(&lines).as_bytes())?;
    write_atomic(&g.report_dir.join("scenes.tsv"), tsv.as_bytes())?;
    Ok(())
}

pub fn predict(_g: GlobalsRef, a: PredictArgs) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(&a.model)?;
    let pool = load_pool(&pool_path(&a.data, &a.split))?;
    let n = a.limit.min(pool.len());
    let mut correct = 0;
    println!("{:>6}  {:>5}  {:>9}", "index", "truth", "predicted");
    for i in 0..n {
        let j = i * pool.len() / n;
        let sample = pool.recorded(j)?;
        let pred = model.predict(&sample)?;
        if pred == sample.label {
            correct += 1;
        }
        println!("{j:>6}  {:>5}  {pred:>9}", sample.label);
    }
    if n > 0 {
        println!("accuracy {:.4} over {n} samples", correct as f64 / n as f64);
    }
    Ok(())
}
