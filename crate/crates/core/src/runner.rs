//! Pipeline stages behind the CLI: generate data, pretrain, apply updates,
//! evaluate, and summarize.  Every stage reads and writes one run directory
//! and records what it produced in the manifest, so stages can run in
//! separate processes and still compose into one reproducible experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::adapters::AdapterStack;
use crate::checkpoint::{
    load_base, load_update, save_base, save_update, Container, LoadedBase, TrainState,
    UpdateCheckpoint,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, fu_ratio, EvalReport, FuRatio, InferenceMode, SweepRow};
use crate::manifest::{sha256_file, sha256_hex, RunManifest};
use crate::model::BaseModel;
use crate::selector::{build_memory, delta_grid, EmbeddingMemory};
use crate::tensor::Adam;
use crate::train::{
    adapter_phase, finetune_phase, pretrain as pretrain_loop, read_curves, recadam_phase,
    write_curves, AdapterDevEval, PretrainCursor, Regime,
};
use crate::vocab::Vocab;
use crate::world::{
    echo_pairs, read_jsonl, sample_fraction, universe_vocab, write_jsonl, QaPair, World,
};

use serde::{Deserialize, Serialize};

// ── artifact layout ─────────────────────────────────────────────────────────

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.to_path_buf() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.jsonl")
    }
    pub fn base(&self) -> PathBuf {
        self.dir.join("base.ckpt")
    }
    pub fn pretrain_curves(&self) -> PathBuf {
        self.dir.join("pretrain_curves.csv")
    }
    pub fn update_phase(&self, phase: usize) -> PathBuf {
        self.dir.join(format!("update_phase{}.ckpt", phase))
    }
    pub fn update_curves(&self, phase: usize) -> PathBuf {
        self.dir.join(format!("update_curves_phase{}.csv", phase))
    }
    pub fn delta_sweep(&self) -> PathBuf {
        self.dir.join("delta_sweep.csv")
    }
    pub fn report_base(&self) -> PathBuf {
        self.dir.join("eval_report_base.json")
    }
    pub fn report_update(&self) -> PathBuf {
        self.dir.join("eval_report_update.json")
    }
    pub fn phase_history(&self) -> PathBuf {
        self.dir.join("eval_phases.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.csv")
    }
}

fn open_manifest(cfg: &ExperimentConfig, run_dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(run_dir)?;
    RunManifest::open(run_dir, &sha256_hex(cfg.canonical_json()?.as_bytes()))
}

/// Read the dataset back and re-check it against the configured world.  A
/// mismatch means the config changed after gen-data — a stale-artifact
/// mistake, reported as a config error.
fn load_world(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<World> {
    let pairs = read_jsonl(&paths.dataset())?;
    let world = World { spec: cfg.split_spec(), pairs };
    world.self_check().map_err(|e| {
        Error::Config(format!(
            "dataset.jsonl disagrees with the [world] config — re-run gen-data ({})",
            e
        ))
    })?;
    Ok(world)
}

/// Load the pretrained checkpoint and re-check it against the config and the
/// dataset it was trained on.
fn load_base_checked(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<LoadedBase> {
    let loaded = load_base(&paths.base())?;
    let want = cfg.model_cfg(loaded.vocab.len());
    if loaded.model.cfg != want {
        return Err(Error::Config(
            "base.ckpt was trained under a different [model] config — re-run pretrain".into(),
        ));
    }
    if let Some(stored) = loaded.meta.get("dataset.sha256") {
        if stored != &sha256_file(&paths.dataset())? {
            return Err(Error::Config(
                "dataset.jsonl changed since pretraining — re-run pretrain".into(),
            ));
        }
    }
    Ok(loaded)
}

// ── gen-data ────────────────────────────────────────────────────────────────

pub fn gen_data(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = open_manifest(cfg, run_dir)?;
    let paths = RunPaths::new(run_dir);

    let world = crate::world::generate_world(&cfg.split_spec())?;
    write_jsonl(&paths.dataset(), &world.pairs)?;

    println!(
        "world: |K_s| = {}, |P_s| = {}, {} target phase(s)",
        world.ks().len(),
        world.ps().len(),
        world.n_phases()
    );
    for p in 1..=world.n_phases() {
        let kt = world.kt(p);
        let conflicts = kt.iter().filter(|q| q.is_conflict).count();
        println!(
            "  phase {}: |K_t| = {} ({} conflicting), |P_t| = {}",
            p,
            kt.len(),
            conflicts,
            world.pt(p).len()
        );
    }
    manifest.record(run_dir, "gen-data", started, &["dataset.jsonl".into()])?;
    println!("wrote {}", paths.dataset().display());
    Ok(())
}

// ── pretrain ────────────────────────────────────────────────────────────────

pub fn pretrain(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = open_manifest(cfg, run_dir)?;
    let paths = RunPaths::new(run_dir);

    let world = load_world(cfg, &paths)?;
    let vocab = universe_vocab();
    let opts = cfg.pretrain_opts();
    let echo = echo_pairs();
    let ks = world.ks();
    // echo pairs ground the answer vocabulary the updates will need; they
    // leak no facts, only token identities
    let mut train: Vec<&QaPair> = ks.clone();
    train.extend(echo.iter());
    let dev = sample_fraction(&ks, cfg.pretrain.dev_fraction, opts.params.seed ^ 0xdeb);

    let mut prev_rows = Vec::new();
    let (mut model, mut adam, cursor) = if paths.base().exists() {
        let loaded = load_base_checked(cfg, &paths)?;
        let finished = loaded.meta.get("finished").map(String::as_str) == Some("true");
        match loaded.state {
            Some(state) if !finished && state.epochs_done < opts.params.epochs => {
                println!("resuming pretraining after epoch {}", state.epochs_done);
                let mut adam = Adam::new(opts.params.lr);
                state.restore_into(&mut adam)?;
                let cursor = state.to_cursor(loaded.model.params.clone());
                let mut model = loaded.model;
                model.params = state.last_params.clone();
                prev_rows = read_curves(&paths.pretrain_curves())?;
                (model, adam, cursor)
            }
            _ => {
                println!("base.ckpt already trained; leaving it as is");
                return Ok(());
            }
        }
    } else {
        let model = BaseModel::init(cfg.model_cfg(vocab.len()), cfg.model.seed)?;
        (model, Adam::new(opts.params.lr), PretrainCursor::fresh())
    };

    let outcome = pretrain_loop(&mut model, &train, &dev, &vocab, &opts, &mut adam, cursor)?;
    prev_rows.extend(outcome.rows.iter().copied());
    write_curves(&paths.pretrain_curves(), &prev_rows)?;

    let mut meta = BTreeMap::new();
    meta.insert("stage".into(), "pretrain".into());
    meta.insert("finished".into(), outcome.finished.to_string());
    meta.insert("dataset.sha256".into(), sha256_file(&paths.dataset())?);
    if let Some((em, loss, _)) = &outcome.cursor.best {
        meta.insert("dev_em".into(), format!("{:.6}", em));
        meta.insert("loss".into(), format!("{:.6}", loss));
        println!(
            "pretrained {} epochs: best dev EM {:.3}, loss {:.4}{}",
            outcome.cursor.epochs_done,
            em,
            loss,
            if outcome.finished { "" } else { " (epoch cap hit; re-run to continue)" }
        );
    }
    let state = if outcome.finished { None } else { TrainState::capture(&adam, &outcome) };
    save_base(&paths.base(), &model, &vocab, meta, state.as_ref())?;

    manifest.record(
        run_dir,
        "pretrain",
        started,
        &["base.ckpt".into(), "pretrain_curves.csv".into()],
    )?;
    Ok(())
}

// ── update ──────────────────────────────────────────────────────────────────

pub fn update(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = open_manifest(cfg, run_dir)?;
    let paths = RunPaths::new(run_dir);

    let world = load_world(cfg, &paths)?;
    let loaded = load_base_checked(cfg, &paths)?;
    let vocab = loaded.vocab;
    let regime = cfg.regime()?;
    let params = cfg.update_params();
    let base_checksum = loaded.model.checksum();

    let ks = world.ks();
    let dev_ks = sample_fraction(&ks, cfg.pretrain.dev_fraction, params.seed ^ 0xd14);
    let n_phases = world.n_phases();
    let mut artifacts = Vec::new();

    match regime {
        Regime::FineTune | Regime::RecAdamLike => {
            let mut model = loaded.model;
            for p in 1..=n_phases {
                let kt = world.kt(p);
                let rows = match regime {
                    Regime::FineTune => {
                        finetune_phase(&mut model, &kt, &dev_ks, &kt, &vocab, &params)?
                    }
                    _ => recadam_phase(
                        &mut model,
                        &kt,
                        &dev_ks,
                        &kt,
                        &vocab,
                        &params,
                        &cfg.recadam_sched(),
                    )?,
                };
                write_curves(&paths.update_curves(p), &rows)?;
                let last = rows.last();
                println!(
                    "phase {}: {} epochs, dev K_s {:.3}, dev K_t {:.3}",
                    p,
                    rows.len(),
                    last.map_or(0.0, |r| r.dev_ks_em),
                    last.and_then(|r| r.dev_kt_em).unwrap_or(0.0),
                );
                let u = UpdateCheckpoint {
                    regime,
                    base_checksum: base_checksum.clone(),
                    delta: cfg.delta(),
                    full_model: Some(model.clone()),
                    policies: vec![],
                    stack: None,
                    memories: vec![],
                };
                save_update_with_counts(&paths.update_phase(p), &u, &model.cfg, &vocab)?;
                artifacts.push(format!("update_phase{}.ckpt", p));
                artifacts.push(format!("update_curves_phase{}.csv", p));
            }
        }
        Regime::AdapterOnly(_) | Regime::GatedPlugin(_) => {
            let mut base = loaded.model;
            base.set_frozen(true);
            let policy = cfg.policy()?;
            let mut stack = AdapterStack::new();
            let mut memories: Vec<EmbeddingMemory> = Vec::new();
            let mut policies = Vec::new();
            let mut delta = cfg.delta();

            for p in 1..=n_phases {
                let kt = world.kt(p);
                memories.push(build_memory(&base, &vocab, &kt, p)?);
                let idx = stack.new_phase(&base.cfg, &policy, params.seed.wrapping_add(p as u64))?;
                policies.push(policy.clone());
                let dev_eval = AdapterDevEval {
                    memories: regime.is_gated().then_some(&memories[..]),
                    delta,
                };
                let rows = adapter_phase(
                    &base, &mut stack, idx, &kt, &dev_ks, &kt, &vocab, &params, &dev_eval,
                )?;
                write_curves(&paths.update_curves(p), &rows)?;
                let last = rows.last();
                println!(
                    "phase {}: {} epochs, dev K_s {:.3}, dev K_t {:.3}",
                    p,
                    rows.len(),
                    last.map_or(0.0, |r| r.dev_ks_em),
                    last.and_then(|r| r.dev_kt_em).unwrap_or(0.0),
                );
                artifacts.push(format!("update_curves_phase{}.csv", p));
            }

            if regime.is_gated() && cfg.sweep_delta() {
                let dev_target: Vec<&QaPair> =
                    (1..=n_phases).flat_map(|p| world.kt(p)).collect();
                let (rows, best) = crate::eval::delta_sweep(
                    &base,
                    &vocab,
                    &stack,
                    &memories,
                    &ks,
                    &dev_target,
                    params.max_answer_len,
                )?;
                write_sweep(&paths.delta_sweep(), &rows)?;
                artifacts.push("delta_sweep.csv".into());
                delta = best;
                println!("gate threshold swept over {} candidates: δ* = {:.2}", rows.len(), best);
            }

            // one checkpoint per phase so mid-sequence snapshots stay
            // inspectable; each carries the phases and memories built so far
            for p in 1..=n_phases {
                let mut partial = AdapterStack::new();
                partial.phases = stack.phases[..p].to_vec();
                let u = UpdateCheckpoint {
                    regime,
                    base_checksum: base_checksum.clone(),
                    delta,
                    full_model: None,
                    policies: policies[..p].to_vec(),
                    stack: Some(partial),
                    memories: memories[..p].to_vec(),
                };
                save_update_with_counts(&paths.update_phase(p), &u, &base.cfg, &vocab)?;
                artifacts.push(format!("update_phase{}.ckpt", p));
            }
        }
    }

    manifest.record(run_dir, "update", started, &artifacts)?;
    Ok(())
}

/// `save_update` plus bookkeeping meta the report stage reads back.
fn save_update_with_counts(
    path: &Path,
    u: &UpdateCheckpoint,
    cfg: &crate::model::TransformerConfig,
    vocab: &Vocab,
) -> Result<()> {
    save_update(path, u, cfg, vocab)?;
    let mut c = Container::load(path)?;
    let trained: usize = match (&u.full_model, &u.stack) {
        (Some(m), _) => m.param_count(),
        (_, Some(s)) => (0..s.phases.len()).map(|i| s.phase_param_count(i)).sum(),
        _ => 0,
    };
    let memory_floats: usize = u.memories.iter().map(|m| m.param_count()).sum();
    c.meta.insert("params_trained".into(), trained.to_string());
    c.meta.insert("memory_floats".into(), memory_floats.to_string());
    c.save(path)
}

fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "delta,dev_ks_em,dev_kt_em,harmonic_mean")?;
    for r in rows {
        writeln!(
            f,
            "{:.2},{:.6},{:.6},{:.6}",
            r.delta, r.dev_ks_em, r.dev_kt_em, r.harmonic
        )?;
    }
    f.flush()?;
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
pub struct PhaseHistoryRow {
    pub phase: usize,
    /// K_t EM right after this phase's own update.
    pub post_own_kt_em: f64,
    /// K_t EM for the same phase under the final system.
    pub final_kt_em: f64,
}

/// Build the update-side inference mode for a loaded checkpoint and score
/// `pairs` with it.
fn eval_update_ckpt(
    u: &UpdateCheckpoint,
    theta_old: &BaseModel,
    vocab: &Vocab,
    pairs: &[&QaPair],
    max_answer_len: usize,
) -> Result<EvalReport> {
    match (&u.full_model, &u.stack) {
        (Some(m), None) => evaluate(m, vocab, InferenceMode::BaseOnly, pairs, max_answer_len),
        (None, Some(stack)) => {
            let mode = if u.regime.is_gated() {
                InferenceMode::Gated { stack, memories: &u.memories, delta: u.delta }
            } else {
                InferenceMode::AlwaysOn { stack }
            };
            evaluate(theta_old, vocab, mode, pairs, max_answer_len)
        }
        _ => Err(Error::Format("update checkpoint holds neither model nor stack".into())),
    }
}

pub fn eval(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = open_manifest(cfg, run_dir)?;
    let paths = RunPaths::new(run_dir);

    let world = load_world(cfg, &paths)?;
    let loaded = load_base_checked(cfg, &paths)?;
    let vocab = loaded.vocab;
    let theta_old = loaded.model;
    let regime = cfg.regime()?;
    let max_len = cfg.eval.max_answer_len;
    let n_phases = world.n_phases();
    let all: Vec<&QaPair> = world.pairs.iter().collect();

    let final_ckpt = load_update(&paths.update_phase(n_phases), &theta_old.cfg)?;
    if final_ckpt.regime != regime {
        return Err(Error::Config(format!(
            "config regime '{}' but update_phase{}.ckpt holds {:?} — re-run update",
            cfg.update.regime, n_phases, final_ckpt.regime
        )));
    }
    if final_ckpt.base_checksum != theta_old.checksum() {
        return Err(Error::Config(
            "update checkpoint was built from a different base.ckpt — re-run update".into(),
        ));
    }

    let base_report = evaluate(&theta_old, &vocab, InferenceMode::BaseOnly, &all, max_len)?;
    write_json(&paths.report_base(), &base_report)?;
    let update_report = eval_update_ckpt(&final_ckpt, &theta_old, &vocab, &all, max_len)?;
    write_json(&paths.report_update(), &update_report)?;

    let mut artifacts =
        vec!["eval_report_base.json".to_string(), "eval_report_update.json".to_string()];

    // per-phase history: how each phase scored right after its own update
    // versus under the final system
    let mut history = Vec::new();
    for p in 1..=n_phases {
        let kt = world.kt(p);
        let post_own = if p == n_phases {
            update_report.kt[p - 1].em_or_zero()
        } else {
            let snap = load_update(&paths.update_phase(p), &theta_old.cfg)?;
            eval_update_ckpt(&snap, &theta_old, &vocab, &kt, max_len)?.kt[p - 1].em_or_zero()
        };
        history.push(PhaseHistoryRow {
            phase: p,
            post_own_kt_em: post_own,
            final_kt_em: update_report.kt[p - 1].em_or_zero(),
        });
    }
    write_json(&paths.phase_history(), &history)?;
    artifacts.push("eval_phases.json".into());

    let fu = fu_ratio(&base_report, &update_report)?;
    println!(
        "K_s {:.3} -> {:.3}, K_t {:.3}, F/U = {} ({} forgets / {} updates)",
        base_report.ks.em_or_zero(),
        update_report.ks.em_or_zero(),
        update_report.kt_total.em_or_zero(),
        fu.ratio,
        fu.forgets,
        fu.updates
    );
    if let Some(c) = &update_report.confusion {
        println!(
            "routing: source base/plugin = {}/{}, target plugin/base = {}/{}",
            c.source_routed_base, c.source_routed_plugin, c.target_routed_plugin, c.target_routed_base
        );
    }
    if let Some(g) = &update_report.gen_vs_retrieval {
        if g.misrouted_source.n == 0 {
            // the swept gate kept every source question away from the
            // plug-ins; re-score at the grid midpoint so the misrouted cell
            // is observable at all
            let mid = delta_grid()[delta_grid().len() / 2];
            if let (None, Some(_)) = (&final_ckpt.full_model, &final_ckpt.stack) {
                let mut loose = UpdateCheckpoint { ..final_ckpt };
                loose.delta = mid;
                let mid_report = eval_update_ckpt(&loose, &theta_old, &vocab, &all, max_len)?;
                write_json(&paths.dir.join("eval_report_update_midgate.json"), &mid_report)?;
                artifacts.push("eval_report_update_midgate.json".into());
                println!(
                    "no source question crossed the swept gate; also wrote \
                     eval_report_update_midgate.json at δ = {:.2}",
                    mid
                );
            }
        }
    }

    manifest.record(run_dir, "eval", started, &artifacts)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(format!("{}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
}

// ── report ──────────────────────────────────────────────────────────────────

pub fn report(cfg: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let started = Instant::now();
    let mut manifest = open_manifest(cfg, run_dir)?;
    let paths = RunPaths::new(run_dir);

    let base: EvalReport = read_json(&paths.report_base())?;
    let update: EvalReport = read_json(&paths.report_update())?;
    let fu = fu_ratio(&base, &update)?;

    let n_phases = cfg.world.target_sizes.len();
    let final_meta = Container::load(&paths.update_phase(n_phases))?.meta;
    let meta_count = |key: &str| -> String {
        final_meta.get(key).cloned().unwrap_or_else(|| "0".into())
    };

    let header = "system,regime,delta,ks_em,ps_em,kt_em,pt_em,fu_ratio,params_trained,memory_floats";
    let fmt_em = |s: &crate::eval::SetScores| {
        s.em.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v))
    };
    let base_line = format!(
        "base,none,n/a,{},{},{},{},n/a,0,0",
        fmt_em(&base.ks),
        fmt_em(&base.ps),
        fmt_em(&base.kt_total),
        fmt_em(&base.pt_total),
    );
    let delta_cell = update
        .delta
        .map_or_else(|| "n/a".to_string(), |d| format!("{:.2}", d));
    let fu_cell = match fu.ratio {
        FuRatio::Value(v) => format!("{:.4}", v),
        FuRatio::NotApplicable => "n/a".into(),
    };
    let update_line = format!(
        "updated,{},{},{},{},{},{},{},{},{}",
        cfg.update.regime,
        delta_cell,
        fmt_em(&update.ks),
        fmt_em(&update.ps),
        fmt_em(&update.kt_total),
        fmt_em(&update.pt_total),
        fu_cell,
        meta_count("params_trained"),
        meta_count("memory_floats"),
    );

    let text = format!("{}\n{}\n{}\n", header, base_line, update_line);
    std::fs::write(paths.summary(), &text)?;
    print!("{}", text);

    manifest.record(run_dir, "report", started, &["summary.csv".into()])?;
    Ok(())
}
