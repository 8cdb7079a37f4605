//! Command implementations: dataset plumbing, the training driver with its
//! metrics/eval artifacts, checkpoint evaluation, and the label-budget sweep.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ssda_core::data::{class_frequencies, load_dataset, split_target, Dataset, Role, SampleSet};
use ssda_core::eval::{evaluate_set, write_report, IouReport};
use ssda_core::losses::Setting;
use ssda_core::model::{load_checkpoint, ModelPair, TinySegConfig};
use ssda_core::selftrain::{
    evaluate_ensemble, generate_pseudolabels, run_algorithm, write_pseudolabel_dir, RunObserver,
    StepMetrics, TrainSets,
};
use ssda_core::{Error, Result};

use crate::config::RunConfig;

/// Comment pinning the column layout; bump the version when columns change.
pub const METRICS_SCHEMA: &str = "# metrics schema v1";
pub const METRICS_HEADER: &str =
    "round,step,lr,loss_total,loss_sup_source,loss_sup_target,loss_cr,loss_pc,grad_norm,mu";

/// Loads the dataset named by `data_dir`, or generates one in memory from
/// the config's generator parameters when the key is empty.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.data_dir.is_empty() {
        return Dataset::generate(cfg.dataset_meta());
    }
    let ds = load_dataset(Path::new(&cfg.data_dir))?;
    if ds.meta.classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "num_classes = {} but the dataset in {} has {} classes",
            cfg.num_classes, cfg.data_dir, ds.meta.classes
        )));
    }
    if ds.meta.size != cfg.image_size {
        return Err(Error::Config(format!(
            "image_size = {} but the dataset in {} uses {}",
            cfg.image_size, cfg.data_dir, ds.meta.size
        )));
    }
    Ok(ds)
}

/// Splits the target pool into its labeled/unlabeled halves and picks the
/// source stream for the setting (SSL trains without any source images).
pub fn build_train_sets(cfg: &RunConfig, ds: &Dataset) -> Result<TrainSets> {
    let (target_labeled, target_unlabeled) = split_target(&ds.target_pool, cfg.n_t, cfg.seed)?;
    let source = if cfg.setting == Setting::Ssl {
        SampleSet {
            role: Role::Source,
            items: Vec::new(),
        }
    } else {
        ds.source.clone()
    };
    Ok(TrainSets {
        source,
        target_labeled,
        target_unlabeled,
    })
}

fn frequencies_block(name: &str, set: &SampleSet, num_classes: usize) -> Result<String> {
    let f = class_frequencies(set, num_classes)?;
    let cells: Vec<String> = f.iter().map(|v| format!("{v:.4}")).collect();
    Ok(format!("{name}: {}\n", cells.join(" ")))
}

/// Writes a generated dataset to `data_dir` and reports per-set class
/// frequencies. Refuses to write into an existing non-empty directory
/// unless `force` is set.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<String> {
    if cfg.data_dir.is_empty() {
        return Err(Error::Config(
            "data_dir must name the output directory for generate".into(),
        ));
    }
    let dir = PathBuf::from(&cfg.data_dir);
    if dir.exists() && dir.read_dir()?.next().is_some() && !force {
        return Err(Error::Config(format!(
            "data_dir {} already exists and is not empty; pass --force to overwrite",
            cfg.data_dir
        )));
    }
    let ds = Dataset::generate(cfg.dataset_meta())?;
    ssda_core::data::save_dataset(&dir, &ds)?;
    let mut out = format!("wrote {} to {}\nclass frequencies:\n", describe(&ds), cfg.data_dir);
    out.push_str(&frequencies_block("  source     ", &ds.source, cfg.num_classes)?);
    out.push_str(&frequencies_block("  target_pool", &ds.target_pool, cfg.num_classes)?);
    out.push_str(&frequencies_block("  val        ", &ds.val, cfg.num_classes)?);
    Ok(out)
}

fn describe(ds: &Dataset) -> String {
    format!(
        "{} source / {} target / {} val images ({}x{}, {} classes)",
        ds.source.len(),
        ds.target_pool.len(),
        ds.val.len(),
        ds.meta.size,
        ds.meta.size,
        ds.meta.classes
    )
}

/// Observer that appends one metrics row per step and scores the student on
/// the validation split after each round.
struct TrainObserver<'a> {
    writer: BufWriter<File>,
    deferred: Option<std::io::Error>,
    val: &'a SampleSet,
    mcfg: TinySegConfig,
    run_dir: PathBuf,
    round_mious: Vec<(usize, f64)>,
}

impl TrainObserver<'_> {
    fn finish(mut self) -> Result<Vec<(usize, f64)>> {
        if let Some(e) = self.deferred.take() {
            return Err(e.into());
        }
        self.writer.flush()?;
        Ok(self.round_mious)
    }
}

impl RunObserver<f32> for TrainObserver<'_> {
    fn on_step(&mut self, m: &StepMetrics) {
        if self.deferred.is_some() {
            return;
        }
        let row = format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.round, m.step, m.lr, m.total, m.sup_source, m.sup_target, m.cr, m.pc, m.grad_norm,
            m.mu
        );
        if let Err(e) = writeln!(self.writer, "{row}") {
            self.deferred = Some(e);
        }
    }

    fn on_round(&mut self, k: usize, pair: &ModelPair<f32>) -> Result<()> {
        if let Some(e) = self.deferred.take() {
            return Err(e.into());
        }
        self.writer.flush()?;
        let (_, report) = evaluate_set(&pair.student, &self.mcfg, self.val)?;
        write_report(&self.run_dir.join(format!("eval_round{k}.txt")), &report)?;
        self.round_mious.push((k, report.miou));
        Ok(())
    }
}

/// What `cmd_train` leaves behind besides the run directory itself.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    /// Final two-checkpoint ensemble mIoU on the validation split.
    pub miou: f64,
    /// Per-round student mIoU, in training order (resumed rounds excluded).
    pub round_mious: Vec<(usize, f64)>,
}

/// Runs the full self-training schedule, appending `metrics.csv`, writing a
/// per-round `eval_round<k>.txt`, the resolved `config.txt`, and the final
/// ensemble `eval.txt`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run_dir = PathBuf::from(&cfg.run_dir);
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.txt"), cfg.to_text())?;

    let ds = load_or_generate(cfg)?;
    let sets = build_train_sets(cfg, &ds)?;
    let mcfg = cfg.model_config();

    let metrics_path = run_dir.join("metrics.csv");
    let fresh = !metrics_path.exists() || fs::metadata(&metrics_path)?.len() == 0;
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;
    let mut writer = BufWriter::new(file);
    if fresh {
        writeln!(writer, "{METRICS_SCHEMA}")?;
        writeln!(writer, "{METRICS_HEADER}")?;
    }
    let mut obs = TrainObserver {
        writer,
        deferred: None,
        val: &ds.val,
        mcfg: mcfg.clone(),
        run_dir: run_dir.clone(),
        round_mious: Vec::new(),
    };

    let (a, b) = run_algorithm::<f32>(
        &cfg.plan(),
        &sets,
        &cfg.trainer_config(),
        cfg.seed,
        &run_dir,
        &mut obs,
    )?;
    let round_mious = obs.finish()?;

    let (_, report) = evaluate_ensemble(&a, &b, &mcfg, &ds.val)?;
    write_report(&run_dir.join("eval.txt"), &report)?;
    Ok(TrainOutcome {
        run_dir,
        miou: report.miou,
        round_mious,
    })
}

/// Scores one checkpoint, or the mean-softmax ensemble of two, on the
/// dataset's validation split, and writes the report to `out`.
pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt_a: &Path,
    ckpt_b: Option<&Path>,
    out: &Path,
) -> Result<IouReport> {
    let ds = load_or_generate(cfg)?;
    let mcfg = cfg.model_config();
    let a = load_checkpoint::<f32>(ckpt_a, &mcfg)?;
    let report = match ckpt_b {
        Some(pb) => {
            let b = load_checkpoint::<f32>(pb, &mcfg)?;
            evaluate_ensemble(&a.student, &b.student, &mcfg, &ds.val)?.1
        }
        None => evaluate_set(&a.student, &mcfg, &ds.val)?.1,
    };
    write_report(out, &report)?;
    Ok(report)
}

/// Pseudolabels the unlabeled target split with an existing checkpoint and
/// writes the label maps plus `coverage.txt` to `out_dir`. Returns the mean
/// coverage.
pub fn cmd_pseudolabel(cfg: &RunConfig, ckpt: &Path, out_dir: &Path) -> Result<f64> {
    let ds = load_or_generate(cfg)?;
    let (_, unlabeled) = split_target(&ds.target_pool, cfg.n_t, cfg.seed)?;
    let mcfg = cfg.model_config();
    let pair = load_checkpoint::<f32>(ckpt, &mcfg)?;
    let pl = generate_pseudolabels(&pair.student, &mcfg, &unlabeled, cfg.tau)?;
    write_pseudolabel_dir(out_dir, &pl)?;
    Ok(pl.mean_coverage())
}

/// One trained sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub setting: Setting,
    pub n_t: usize,
    pub seed: u64,
    pub miou: f64,
}

/// Mean ± sample standard deviation of one (setting, n_t) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub setting: Setting,
    pub n_t: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Groups rows by (setting, n_t) in first-appearance order. Single-run
/// cells report a standard deviation of zero.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepCell> {
    let mut cells: Vec<SweepCell> = Vec::new();
    for row in rows {
        if !cells
            .iter()
            .any(|c| c.setting == row.setting && c.n_t == row.n_t)
        {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.setting == row.setting && r.n_t == row.n_t)
                .map(|r| r.miou)
                .collect();
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                (ss / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            cells.push(SweepCell {
                setting: row.setting,
                n_t: row.n_t,
                mean,
                std,
                n,
            });
        }
    }
    cells
}

pub fn format_summary(cells: &[SweepCell]) -> String {
    let mut out = String::from("setting  n_t  runs  miou\n");
    for c in cells {
        out.push_str(&format!(
            "{:<7}  {:>3}  {:>4}  {:.6} ± {:.6}\n",
            c.setting.name(),
            c.n_t,
            c.n,
            c.mean,
            c.std
        ));
    }
    out
}

/// Trains every (n_t, seed) cell as a sub-run under the base run directory,
/// writes `sweep.csv`, and returns the rows with their per-cell summary.
/// A label budget of zero switches that cell to the UDA setting.
pub fn cmd_sweep(
    base: &RunConfig,
    labels: &[usize],
    seeds: &[u64],
) -> Result<(Vec<SweepRow>, Vec<SweepCell>)> {
    if labels.is_empty() {
        return Err(Error::Config("sweep needs a non-empty labels list".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs a non-empty seeds list".into()));
    }
    let sweep_dir = PathBuf::from(&base.run_dir);
    fs::create_dir_all(&sweep_dir)?;

    let mut rows = Vec::new();
    for &n_t in labels {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.n_t = n_t;
            cfg.seed = seed;
            if n_t == 0 {
                cfg.setting = Setting::Uda;
            }
            let cell = format!("cell_{}_nt{:03}_seed{}", cfg.setting.name(), n_t, seed);
            cfg.run_dir = sweep_dir.join(cell).to_string_lossy().into_owned();
            cfg.validate()?;
            let outcome = cmd_train(&cfg)?;
            rows.push(SweepRow {
                setting: cfg.setting,
                n_t,
                seed,
                miou: outcome.miou,
            });
        }
    }

    let mut csv = String::from("setting,n_t,seed,miou\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.setting.name(),
            r.n_t,
            r.seed,
            r.miou
        ));
    }
    fs::write(sweep_dir.join("sweep.csv"), csv)?;
    let cells = summarize(&rows);
    Ok((rows, cells))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ssda_core::eval::parse_report;

    /// Desk-size-in-miniature config that trains in well under a second.
    fn tiny_config(run_dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("image_size", "8"),
            ("num_classes", "3"),
            ("base_width", "4"),
            ("embed_dim", "4"),
            ("dilations", "1"),
            ("downsample", "4"),
            ("n_source", "3"),
            ("n_target_pool", "4"),
            ("n_val", "2"),
            ("n_t", "2"),
            ("rounds", "1"),
            ("n_steps", "4"),
            ("n_drop", "2"),
            ("pc_warmup_steps", "1"),
            ("n_pix", "8"),
            ("batch_source", "1"),
            ("batch_target", "1"),
            ("batch_unlabeled", "1"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg.run_dir = run_dir.to_string_lossy().into_owned();
        cfg
    }

    fn metrics_columns(dir: &Path) -> Vec<Vec<String>> {
        let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_SCHEMA);
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        lines
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    }

    #[test]
    fn train_writes_all_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = tiny_config(&dir);
        let outcome = cmd_train(&cfg).unwrap();

        assert!(dir.join("config.txt").exists());
        assert!(dir.join("round0.ckpt").exists());
        assert!(dir.join("round1.ckpt").exists());
        assert!(dir.join("eval_round0.txt").exists());
        assert!(dir.join("eval_round1.txt").exists());
        assert!(dir.join("pl_round1").join("coverage.txt").exists());

        // resolved config reproduces the run config exactly
        let mut back = RunConfig::default();
        back.apply_file(&dir.join("config.txt")).unwrap();
        assert_eq!(back, cfg);

        // metrics: 2 rounds x 4 steps, rounds and steps in order
        let rows = metrics_columns(&dir);
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0][0], "0");
        assert_eq!(rows[7][0], "1");
        assert_eq!(rows[3][1], "3");

        // final report parses back to the returned miou (6-decimal file)
        let report =
            parse_report(&fs::read_to_string(dir.join("eval.txt")).unwrap()).unwrap();
        assert!((report.miou - outcome.miou).abs() < 1e-6);
        assert_eq!(outcome.round_mious.len(), 2);
    }

    #[test]
    fn rerun_with_same_seed_reproduces_eval_byte_for_byte() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_a = tiny_config(&tmp.path().join("a"));
        let cfg_b = tiny_config(&tmp.path().join("b"));
        cmd_train(&cfg_a).unwrap();
        cmd_train(&cfg_b).unwrap();
        let a = fs::read(tmp.path().join("a").join("eval.txt")).unwrap();
        let b = fs::read(tmp.path().join("b").join("eval.txt")).unwrap();
        assert!(!a.is_empty() && a == b);
    }

    #[test]
    fn ssl_runs_without_source_and_logs_zero_source_loss() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = tiny_config(&dir);
        cfg.set("setting", "ssl").unwrap();
        cmd_train(&cfg).unwrap();
        for row in metrics_columns(&dir) {
            assert_eq!(row[4], "0.000000"); // loss_sup_source
        }
    }

    #[test]
    fn disable_cr_zeroes_the_cr_column() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = tiny_config(&dir);
        cfg.set("disable_cr", "true").unwrap();
        cmd_train(&cfg).unwrap();
        let rows = metrics_columns(&dir);
        assert!(rows.iter().all(|r| r[6] == "0.000000")); // loss_cr
        // the supervised target column still moves
        assert!(rows.iter().any(|r| r[5] != "0.000000"));
    }

    #[test]
    fn invalid_flag_combinations_are_refused_before_any_training() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = tiny_config(&dir);
        cfg.set("setting", "uda").unwrap(); // n_t is still 2
        let err = cmd_train(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(!dir.join("round0.ckpt").exists());
    }

    #[test]
    fn generate_refuses_nonempty_dir_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let mut cfg = tiny_config(&tmp.path().join("run"));
        cfg.data_dir = data.to_string_lossy().into_owned();

        let msg = cmd_generate(&cfg, false).unwrap();
        assert!(msg.contains("class frequencies"));
        let err = cmd_generate(&cfg, false).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(format!("{err}").contains("--force"));
        cmd_generate(&cfg, true).unwrap();

        // a training run can consume the directory it just wrote
        cfg.run_dir = tmp
            .path()
            .join("run_from_disk")
            .to_string_lossy()
            .into_owned();
        let outcome = cmd_train(&cfg).unwrap();
        assert!(outcome.miou.is_finite());
    }

    #[test]
    fn generate_without_data_dir_is_an_error() {
        let cfg = tiny_config(Path::new("unused"));
        assert!(matches!(cmd_generate(&cfg, false), Err(Error::Config(_))));
    }

    #[test]
    fn loaded_dataset_must_match_the_model_shape_keys() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let mut cfg = tiny_config(&tmp.path().join("run"));
        cfg.data_dir = data.to_string_lossy().into_owned();
        cmd_generate(&cfg, false).unwrap();

        let mut wrong = cfg.clone();
        wrong.set("num_classes", "4").unwrap();
        let msg = format!("{}", cmd_train(&wrong).unwrap_err());
        assert!(msg.contains("num_classes"), "{msg}");
    }

    #[test]
    fn eval_single_and_self_ensemble_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let cfg = tiny_config(&dir);
        cmd_train(&cfg).unwrap();
        let ckpt = dir.join("round1.ckpt");

        let single = cmd_eval(&cfg, &ckpt, None, &tmp.path().join("single.txt")).unwrap();
        let paired =
            cmd_eval(&cfg, &ckpt, Some(&ckpt), &tmp.path().join("paired.txt")).unwrap();
        assert_eq!(single.per_class, paired.per_class);

        // report landed on disk and is parseable
        let text = fs::read_to_string(tmp.path().join("single.txt")).unwrap();
        assert!((parse_report(&text).unwrap().miou - single.miou).abs() < 1e-6);
    }

    #[test]
    fn pseudolabel_command_writes_maps_and_reports_coverage() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let mut cfg = tiny_config(&dir);
        cfg.set("tau", "0.5").unwrap();
        cmd_train(&cfg).unwrap();

        let out = tmp.path().join("pl");
        let cov = cmd_pseudolabel(&cfg, &dir.join("round0.ckpt"), &out).unwrap();
        assert!((0.0..=1.0).contains(&cov));
        let text = fs::read_to_string(out.join("coverage.txt")).unwrap();
        assert!(text.starts_with("producer="));
        // two unlabeled pool images -> two label maps
        assert_eq!(
            fs::read_dir(&out)
                .unwrap()
                .filter(|e| e.as_ref().unwrap().path().extension() == Some("pgm".as_ref()))
                .count(),
            2
        );
    }

    #[test]
    fn sweep_trains_each_cell_and_summarizes() {
        let tmp = tempfile::tempdir().unwrap();
        let base = tiny_config(&tmp.path().join("sweep"));
        let (rows, cells) = cmd_sweep(&base, &[0, 2], &[0, 1]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(cells.len(), 2);

        // n_t = 0 cells fall back to UDA
        assert!(rows
            .iter()
            .filter(|r| r.n_t == 0)
            .all(|r| r.setting == Setting::Uda));
        assert_eq!(cells[0].setting, Setting::Uda);
        assert_eq!(cells[1].setting, Setting::Ssda);
        assert!(cells.iter().all(|c| c.n == 2));

        let csv = fs::read_to_string(tmp.path().join("sweep").join("sweep.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "setting,n_t,seed,miou");
        assert_eq!(lines.count(), 4);
        assert!(csv.contains("uda,0,1,"));

        // each cell left a complete run directory behind
        assert!(tmp
            .path()
            .join("sweep")
            .join("cell_uda_nt000_seed0")
            .join("eval.txt")
            .exists());
        assert!(tmp
            .path()
            .join("sweep")
            .join("cell_ssda_nt002_seed1")
            .join("eval.txt")
            .exists());
    }

    #[test]
    fn summary_matches_hand_computed_mean_and_std() {
        let rows = vec![
            SweepRow { setting: Setting::Ssda, n_t: 8, seed: 0, miou: 0.5 },
            SweepRow { setting: Setting::Ssda, n_t: 8, seed: 1, miou: 0.7 },
            SweepRow { setting: Setting::Uda, n_t: 0, seed: 0, miou: 0.4 },
        ];
        let cells = summarize(&rows);
        assert_eq!(cells.len(), 2);
        assert!((cells[0].mean - 0.6).abs() < 1e-12);
        assert!((cells[0].std - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(cells[1].n, 1);
        assert_eq!(cells[1].std, 0.0);
        let table = format_summary(&cells);
        assert!(table.contains("ssda") && table.contains("0.600000"));
    }
}
