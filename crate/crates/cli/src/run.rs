//! Executes one [`ExperimentSpec`]: per-seed training and evaluation, the
//! metric store, summary tables and `--check` thresholds.

use std::fs;
use std::path::{Path, PathBuf};

use hallucidet_core::classic::ClassicMethod;
use hallucidet_core::data::{generate_dataset, SceneConfig};
use hallucidet_core::detector::Detector;
use hallucidet_core::hallucinet::{count_params, HalluciNet, HalluciNetConfig};
use hallucidet_core::rng::mix_seed;
use hallucidet_core::train::{
    evaluate_pipeline, evaluate_rgb, finetune_ir_detector, pretrain_rgb_detector, train_hallucidet,
    train_reconstruction_translator, TrainConfig, TrainReport, Translator,
};
use hallucidet_core::{Dataset, LossWeights};
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, CliResult};
use crate::panel::{render_panel, PanelRow};
use crate::rows::{
    line_plot_svg, mean_of, read_rows, setting_value, summarize, sweep_points, upsert_rows,
    write_csv_atomic, write_text_atomic, MetricRow, SummaryRow, METRICS_FILE,
};
use crate::spec::{hash_json, Command, ExperimentSpec};

pub const CACHE_DIR: &str = "cache";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const NO_SETTING: &str = "-";

// Stage tags mixed into per-seed training seeds.
const STAGE_PRETRAIN: u64 = 1;
const STAGE_FINETUNE: u64 = 2;
const STAGE_HALLUCIDET: u64 = 3;
const STAGE_RECON: u64 = 4;

/// What a finished run left behind.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub command: Command,
    pub run_id: String,
    pub run_dir: PathBuf,
    pub spec_hash: String,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    /// `--check` failures; empty when checks are off or all passed.
    pub failures: Vec<String>,
}

struct SeedData {
    seed: u64,
    scene: SceneConfig,
    train: Dataset,
    test: Dataset,
}

pub struct Runner {
    spec: ExperimentSpec,
    out_root: PathBuf,
    hash: String,
    run_dir: PathBuf,
    quiet: bool,
}

impl Runner {
    pub fn new(spec: ExperimentSpec, out_root: impl Into<PathBuf>) -> CliResult<Self> {
        spec.validate()?;
        let out_root = out_root.into();
        let hash = spec.hash();
        let run_dir = out_root.join(spec.run_id());
        Ok(Self { spec, out_root, hash, run_dir, quiet: false })
    }

    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn spec(&self) -> &ExperimentSpec {
        &self.spec
    }

    /// The (cached) pretrained detector of `seed` with its train and test
    /// splits, exactly as every command sees them.
    pub fn pretrained(&self, seed: u64) -> CliResult<(Detector, Dataset, Dataset)> {
        let d = self.seed_data(seed)?;
        let (det, _, _) = self.detector(&d)?;
        Ok((det, d.train, d.test))
    }

    /// The per-seed training config of the translator stage.
    pub fn hallucidet_config(&self, seed: u64) -> TrainConfig {
        self.stage_cfg(&self.spec.hallucidet, seed, STAGE_HALLUCIDET)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.spec.command, msg.as_ref());
        }
    }

    pub fn run(&self) -> CliResult<RunOutcome> {
        for sub in ["checkpoints", "reports", "panels"] {
            fs::create_dir_all(self.run_dir.join(sub))?;
        }
        write_text_atomic(&self.run_dir.join(RESOLVED_CONFIG), &self.spec.to_toml_string()?)?;
        let mut rows = Vec::new();
        let mut check_rows = Vec::new();
        match self.spec.command {
            Command::Pretrain => self.cmd_pretrain(&mut rows)?,
            Command::Finetune => self.cmd_finetune(&mut rows)?,
            Command::Hallucidet => self.cmd_hallucidet(&mut rows, &mut check_rows)?,
            Command::Baseline => self.cmd_baseline(&mut rows, &mut check_rows)?,
            Command::Recon => self.cmd_recon(&mut rows)?,
            Command::Eval => self.cmd_eval(&mut rows)?,
            Command::SweepFraction => self.cmd_sweep_fraction(&mut rows)?,
            Command::SweepLambda => self.cmd_sweep_lambda(&mut rows)?,
            Command::SweepCapacity => self.cmd_sweep_capacity(&mut rows)?,
            Command::Panel => self.cmd_panel()?,
            Command::Report => return self.cmd_report(),
        }
        let reports = self.run_dir.join("reports");
        if !rows.is_empty() {
            upsert_rows(&reports.join(METRICS_FILE), &rows)?;
            upsert_rows(&self.out_root.join(METRICS_FILE), &rows)?;
        }
        let summary = summarize(&rows)?;
        write_tables(&summary, &reports)?;
        let failures = if self.spec.check {
            let mut all = rows.clone();
            all.extend(check_rows);
            self.check(&summarize(&all)?)
        } else {
            Vec::new()
        };
        let outcome = RunOutcome {
            command: self.spec.command,
            run_id: self.spec.run_id(),
            run_dir: self.run_dir.clone(),
            spec_hash: self.hash.clone(),
            rows,
            summary,
            failures,
        };
        write_text_atomic(&reports.join("summary.json"), &summary_json(&outcome)?)?;
        Ok(outcome)
    }

    fn row(&self, method: &str, setting: &str, seed: u64, ap50: f64) -> MetricRow {
        MetricRow {
            experiment: self.spec.command.to_string(),
            detector: self.spec.detector_label(),
            method: method.into(),
            setting: setting.into(),
            seed,
            ap50,
            spec_hash: self.hash.clone(),
        }
    }

    fn seed_data(&self, seed: u64) -> CliResult<SeedData> {
        let scene = SceneConfig { seed: mix_seed(&[self.spec.scene.seed, seed]), ..self.spec.scene.clone() };
        let (train, test) = generate_dataset(&scene, self.spec.dataset.n_train, self.spec.dataset.n_test)?;
        Ok(SeedData { seed, scene, train, test })
    }

    fn stage_cfg(&self, base: &TrainConfig, seed: u64, stage: u64) -> TrainConfig {
        TrainConfig { seed: mix_seed(&[base.seed, seed, stage]), ..base.clone() }
    }

    fn cache_path(&self, kind: &str, key: &serde_json::Value) -> PathBuf {
        self.out_root.join(CACHE_DIR).join(format!("{kind}-{}.ckpt", &hash_json(key)[..24]))
    }

    /// Loads a model from the cache or trains and stores it. The training
    /// report lives next to the checkpoint.
    fn cached<M>(
        &self,
        kind: &str,
        key: &serde_json::Value,
        load: impl Fn(&Path) -> hallucidet_core::Result<M>,
        save: impl Fn(&M, &Path) -> hallucidet_core::Result<()>,
        train: impl FnOnce() -> hallucidet_core::Result<(M, TrainReport)>,
    ) -> CliResult<(M, TrainReport, PathBuf)> {
        let path = self.cache_path(kind, key);
        let report_path = path.with_extension("report.json");
        if path.exists() && report_path.exists() {
            let model = load(&path)?;
            let report: TrainReport = serde_json::from_slice(&fs::read(&report_path)?)?;
            return Ok((model, report, path));
        }
        let (model, report) = train()?;
        fs::create_dir_all(path.parent().expect("cache dir"))?;
        let tmp = path.with_extension(format!("ckpt.{}.tmp", std::process::id()));
        save(&model, &tmp)?;
        fs::rename(&tmp, &path)?;
        write_text_atomic(&report_path, &serde_json::to_string_pretty(&report)?)?;
        Ok((model, report, path))
    }

    fn pretrain_key(&self, d: &SeedData) -> serde_json::Value {
        json!({
            "kind": "pretrain",
            "scene": d.scene,
            "dataset": self.spec.dataset,
            "detector": self.spec.detector,
            "train": self.stage_cfg(&self.spec.pretrain, d.seed, STAGE_PRETRAIN),
        })
    }

    fn detector(&self, d: &SeedData) -> CliResult<(Detector, TrainReport, PathBuf)> {
        let cfg = self.stage_cfg(&self.spec.pretrain, d.seed, STAGE_PRETRAIN);
        self.cached(
            "detector",
            &self.pretrain_key(d),
            Detector::load,
            Detector::save,
            || {
                self.log(format!("seed {}: pretraining detector", d.seed));
                pretrain_rgb_detector(&d.train, &self.spec.detector, &cfg)
            },
        )
    }

    fn finetuned(&self, d: &SeedData, det: &Detector) -> CliResult<(Detector, TrainReport, PathBuf)> {
        let cfg = self.stage_cfg(&self.spec.finetune, d.seed, STAGE_FINETUNE);
        let key = json!({ "kind": "finetune", "init": self.pretrain_key(d), "train": cfg });
        self.cached("finetune", &key, Detector::load, Detector::save, || {
            self.log(format!("seed {}: fine-tuning on IR", d.seed));
            finetune_ir_detector(det, &d.train, &cfg)
        })
    }

    fn hallucinet(
        &self,
        d: &SeedData,
        det: &Detector,
        net: &HalluciNetConfig,
        base: &TrainConfig,
    ) -> CliResult<(HalluciNet, TrainReport, PathBuf)> {
        let cfg = self.stage_cfg(base, d.seed, STAGE_HALLUCIDET);
        let key = json!({ "kind": "hallucidet", "detector": self.pretrain_key(d), "net": net, "train": cfg });
        self.cached("hallucinet", &key, HalluciNet::load, HalluciNet::save, || {
            self.log(format!("seed {}: training translator through frozen detector", d.seed));
            train_hallucidet(det, &d.train, net, &cfg)
        })
    }

    fn recon_net(&self, d: &SeedData) -> CliResult<(HalluciNet, TrainReport, PathBuf)> {
        let net = self.spec.net.resolve()?;
        let cfg = self.stage_cfg(&self.spec.recon, d.seed, STAGE_RECON);
        let key = json!({
            "kind": "recon",
            "scene": d.scene,
            "dataset": self.spec.dataset,
            "net": net,
            "train": cfg,
        });
        self.cached("recon", &key, HalluciNet::load, HalluciNet::save, || {
            self.log(format!("seed {}: training reconstruction translator", d.seed));
            train_reconstruction_translator(&d.train, &net, &cfg)
        })
    }

    /// Copies a cached checkpoint into the run and writes its report.
    fn keep(&self, name: &str, ckpt: &Path, report: &TrainReport) -> CliResult<()> {
        fs::copy(ckpt, self.run_dir.join("checkpoints").join(format!("{name}.ckpt")))?;
        write_text_atomic(
            &self.run_dir.join("reports").join(format!("{name}.json")),
            &serde_json::to_string_pretty(report)?,
        )
    }

    fn classic(&self, key: &str) -> CliResult<ClassicMethod> {
        Ok(ClassicMethod::parse_with(key, self.spec.classic.sigma, self.spec.classic.bins)?)
    }

    fn methods(&self) -> Vec<String> {
        let mut out = Vec::new();
        for m in &self.spec.methods {
            if m == "all" {
                out.push("gray".to_string());
                out.extend(ClassicMethod::TABLE_KEYS.iter().map(|s| s.to_string()));
            } else {
                out.push(m.clone());
            }
        }
        let mut seen = std::collections::HashSet::new();
        out.retain(|m| seen.insert(m.clone()));
        out
    }

    fn gray_ap(&self, d: &SeedData, det: &Detector) -> CliResult<f64> {
        Ok(evaluate_pipeline(None, det, &d.test, &self.spec.decode)?)
    }

    fn cmd_pretrain(&self, rows: &mut Vec<MetricRow>) -> CliResult<()> {
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, rep, path) = self.detector(&d)?;
            self.keep(&format!("detector-seed{seed}"), &path, &rep)?;
            let rgb = evaluate_rgb(&det, &d.test, &self.spec.decode)?;
            let gray = self.gray_ap(&d, &det)?;
            self.log(format!("seed {seed}: rgb {rgb:.4} gray {gray:.4}"));
            rows.push(self.row("rgb", NO_SETTING, seed, rgb));
            rows.push(self.row("gray", NO_SETTING, seed, gray));
        }
        Ok(())
    }

    fn cmd_finetune(&self, rows: &mut Vec<MetricRow>) -> CliResult<()> {
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, _, _) = self.detector(&d)?;
            let (ft, rep, path) = self.finetuned(&d, &det)?;
            self.keep(&format!("finetune-seed{seed}"), &path, &rep)?;
            let ap = self.gray_ap(&d, &ft)?;
            self.log(format!("seed {seed}: finetune {ap:.4}"));
            rows.push(self.row("finetune", NO_SETTING, seed, ap));
        }
        Ok(())
    }

    fn cmd_hallucidet(&self, rows: &mut Vec<MetricRow>, check_rows: &mut Vec<MetricRow>) -> CliResult<()> {
        let net = self.spec.net.resolve()?;
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, _, _) = self.detector(&d)?;
            let (h, rep, path) = self.hallucinet(&d, &det, &net, &self.spec.hallucidet)?;
            self.keep(&format!("hallucinet-seed{seed}"), &path, &rep)?;
            let ap = evaluate_pipeline(Some(&Translator::Net(h)), &det, &d.test, &self.spec.decode)?;
            self.log(format!("seed {seed}: hallucidet {ap:.4}"));
            rows.push(self.row("hallucidet", NO_SETTING, seed, ap));
            if self.spec.check {
                check_rows.push(self.row("gray", NO_SETTING, seed, self.gray_ap(&d, &det)?));
            }
        }
        Ok(())
    }

    fn cmd_baseline(&self, rows: &mut Vec<MetricRow>, check_rows: &mut Vec<MetricRow>) -> CliResult<()> {
        let methods = self.methods();
        let parsed = methods.iter().map(|m| self.classic(m)).collect::<CliResult<Vec<_>>>()?;
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, _, _) = self.detector(&d)?;
            for (key, m) in methods.iter().zip(&parsed) {
                let ap = evaluate_pipeline(Some(&Translator::Classic(m.clone())), &det, &d.test, &self.spec.decode)?;
                self.log(format!("seed {seed}: {key} {ap:.4}"));
                rows.push(self.row(key, NO_SETTING, seed, ap));
            }
            if self.spec.check && !methods.iter().any(|m| m == "gray") {
                check_rows.push(self.row("gray", NO_SETTING, seed, self.gray_ap(&d, &det)?));
            }
        }
        Ok(())
    }

    fn cmd_recon(&self, rows: &mut Vec<MetricRow>) -> CliResult<()> {
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, _, _) = self.detector(&d)?;
            let (net, rep, path) = self.recon_net(&d)?;
            self.keep(&format!("recon-seed{seed}"), &path, &rep)?;
            let ap = evaluate_pipeline(Some(&Translator::Net(net)), &det, &d.test, &self.spec.decode)?;
            self.log(format!("seed {seed}: recon {ap:.4}"));
            rows.push(self.row("recon", NO_SETTING, seed, ap));
        }
        Ok(())
    }

    /// Evaluation only: every referenced checkpoint must already exist.
    fn cmd_eval(&self, rows: &mut Vec<MetricRow>) -> CliResult<()> {
        let require = |p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(CliError::MissingCheckpoint(p.to_path_buf()))
            }
        };
        let translator = if self.spec.checkpoint.is_empty() {
            None
        } else {
            let p = PathBuf::from(&self.spec.checkpoint);
            require(&p)?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Some((format!("net:{stem}"), Translator::Net(HalluciNet::load(&p)?)))
        };
        let fixed_det = if self.spec.detector_checkpoint.is_empty() {
            None
        } else {
            let p = PathBuf::from(&self.spec.detector_checkpoint);
            require(&p)?;
            Some(Detector::load(&p)?)
        };
        let methods = if translator.is_some() && self.spec.methods == ExperimentSpec::default().methods {
            Vec::new()
        } else {
            self.methods()
        };
        let parsed = methods.iter().map(|m| self.classic(m)).collect::<CliResult<Vec<_>>>()?;
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let det = match &fixed_det {
                Some(det) => det.clone(),
                None => {
                    let p = self.cache_path("detector", &self.pretrain_key(&d));
                    require(&p)?;
                    Detector::load(&p)?
                }
            };
            for (key, m) in methods.iter().zip(&parsed) {
                let ap = evaluate_pipeline(Some(&Translator::Classic(m.clone())), &det, &d.test, &self.spec.decode)?;
                rows.push(self.row(key, NO_SETTING, seed, ap));
            }
            if let Some((name, t)) = &translator {
                let ap = evaluate_pipeline(Some(t), &det, &d.test, &self.spec.decode)?;
                rows.push(self.row(name, NO_SETTING, seed, ap));
            }
        }
        Ok(())
    }

    fn cmd_sweep_fraction(&self, rows: &mut Vec<MetricRow>) -> CliResult<()> {
        let net = self.spec.net.resolve()?;
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, _, _) = self.detector(&d)?;
            for &f in &self.spec.sweep.fractions {
                let base = TrainConfig { train_fraction: f, ..self.spec.hallucidet.clone() };
                let (h, rep, path) = self.hallucinet(&d, &det, &net, &base)?;
                self.keep(&format!("hallucinet-fraction{f}-seed{seed}"), &path, &rep)?;
                let ap = evaluate_pipeline(Some(&Translator::Net(h)), &det, &d.test, &self.spec.decode)?;
                self.log(format!("seed {seed}: fraction {f} ({} samples) {ap:.4}", rep.n_train));
                rows.push(self.row("hallucidet", &format!("fraction={f}"), seed, ap));
            }
        }
        Ok(())
    }

    fn cmd_sweep_lambda(&self, rows: &mut Vec<MetricRow>) -> CliResult<()> {
        let net = self.spec.net.resolve()?;
        let grid = self.spec.sweep.lambda_weights()?;
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, _, _) = self.detector(&d)?;
            for w in &grid {
                let base = TrainConfig { weights: *w, ..self.spec.hallucidet.clone() };
                let (h, rep, path) = self.hallucinet(&d, &det, &net, &base)?;
                self.keep(&format!("hallucinet-{}-seed{seed}", w.key().replace(';', "_")), &path, &rep)?;
                let ap = evaluate_pipeline(Some(&Translator::Net(h)), &det, &d.test, &self.spec.decode)?;
                self.log(format!("seed {seed}: {} {ap:.4}", w.key()));
                rows.push(self.row("hallucidet", &w.key(), seed, ap));
            }
        }
        Ok(())
    }

    fn cmd_sweep_capacity(&self, rows: &mut Vec<MetricRow>) -> CliResult<()> {
        let nets = self
            .spec
            .sweep
            .presets
            .iter()
            .map(|p| {
                let mut cfg = HalluciNetConfig::preset(p)?;
                cfg.use_attention = self.spec.net.use_attention;
                Ok((p.clone(), cfg))
            })
            .collect::<CliResult<Vec<_>>>()?;
        for &seed in &self.spec.seeds {
            let d = self.seed_data(seed)?;
            let (det, _, _) = self.detector(&d)?;
            for (name, cfg) in &nets {
                let (h, rep, path) = self.hallucinet(&d, &det, cfg, &self.spec.hallucidet)?;
                self.keep(&format!("hallucinet-{name}-seed{seed}"), &path, &rep)?;
                let ap = evaluate_pipeline(Some(&Translator::Net(h)), &det, &d.test, &self.spec.decode)?;
                self.log(format!("seed {seed}: {name} ({} params) {ap:.4}", count_params(cfg)));
                rows.push(self.row("hallucidet", &format!("preset={name}"), seed, ap));
            }
        }
        Ok(())
    }

    fn cmd_panel(&self) -> CliResult<()> {
        let seed = self.spec.seeds[0];
        let d = self.seed_data(seed)?;
        let (det, _, _) = self.detector(&d)?;
        let n = self.spec.panel.n_samples.min(d.test.len());
        let samples = &d.test.samples[..n];
        let mut finetuned = None;
        for name in &self.spec.panel.rows {
            if name == "finetune" && finetuned.is_none() {
                finetuned = Some(self.finetuned(&d, &det)?.0);
            }
        }
        let mut rows = Vec::new();
        for name in &self.spec.panel.rows {
            let row = match name.as_str() {
                "rgb" => PanelRow::GroundTruth,
                "finetune" => PanelRow::Chain {
                    translator: Translator::gray(),
                    detector: finetuned.as_ref().expect("trained above"),
                },
                "hallucidet" => {
                    let net = self.spec.net.resolve()?;
                    let h = self.hallucinet(&d, &det, &net, &self.spec.hallucidet)?.0;
                    PanelRow::Chain { translator: Translator::Net(h), detector: &det }
                }
                "recon" => PanelRow::Chain { translator: Translator::Net(self.recon_net(&d)?.0), detector: &det },
                key => PanelRow::Chain { translator: Translator::Classic(self.classic(key)?), detector: &det },
            };
            rows.push(row);
        }
        let path = self.run_dir.join("panels").join(format!("panel-seed{seed}.png"));
        render_panel(samples, &rows, &self.spec.decode, &path)?;
        self.log(format!("wrote {}", path.display()));
        Ok(())
    }

    /// Rebuilds every summary table from the shared metric store.
    fn cmd_report(&self) -> CliResult<RunOutcome> {
        let rows = read_rows(&self.out_root.join(METRICS_FILE))?;
        if rows.is_empty() {
            return Err(CliError::Config(format!(
                "no metric rows under {}",
                self.out_root.join(METRICS_FILE).display()
            )));
        }
        let summary = summarize(&rows)?;
        let reports = self.run_dir.join("reports");
        write_tables(&summary, &reports)?;
        let outcome = RunOutcome {
            command: Command::Report,
            run_id: self.spec.run_id(),
            run_dir: self.run_dir.clone(),
            spec_hash: self.hash.clone(),
            rows,
            summary,
            failures: Vec::new(),
        };
        write_text_atomic(&reports.join("summary.json"), &summary_json(&outcome)?)?;
        Ok(outcome)
    }

    fn check(&self, summary: &[SummaryRow]) -> Vec<String> {
        let t = &self.spec.thresholds;
        let mut fails = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                fails.push(msg);
            }
        };
        let get = |m: &str| mean_of(summary, m, NO_SETTING);
        match self.spec.command {
            Command::Pretrain => {
                if let (Some(rgb), Some(gray)) = (get("rgb"), get("gray")) {
                    need(
                        rgb - gray >= t.min_modality_gap,
                        format!("modality gap {:.4} < {}", rgb - gray, t.min_modality_gap),
                    );
                }
            }
            Command::Hallucidet => {
                if let (Some(h), Some(gray)) = (get("hallucidet"), get("gray")) {
                    need(
                        h >= gray + t.min_gain_over_gray,
                        format!("hallucidet {h:.4} < gray {gray:.4} + {}", t.min_gain_over_gray),
                    );
                }
            }
            Command::Baseline => {
                if let (Some(inv), Some(gray)) = (get("invert"), get("gray")) {
                    need(inv >= gray, format!("invert {inv:.4} < gray {gray:.4}"));
                }
            }
            Command::SweepFraction => {
                let pts = sweep_points(summary, Command::SweepFraction.as_str(), "fraction");
                if let (Some(lo), Some(hi)) = (pts.first(), pts.last()) {
                    need(
                        hi.1 >= lo.1,
                        format!("fraction {} AP {:.4} < fraction {} AP {:.4}", hi.0, hi.1, lo.0, lo.1),
                    );
                }
            }
            Command::SweepLambda => {
                let lam = |s: &SummaryRow| parse_lambda_key(&s.setting);
                let reg_only: Vec<_> = summary
                    .iter()
                    .filter(|s| lam(s).is_some_and(|w| w.lambda_cls == 0.0 && w.lambda_reg > 0.0))
                    .collect();
                let cls_only: Vec<_> = summary
                    .iter()
                    .filter(|s| lam(s).is_some_and(|w| w.lambda_reg == 0.0 && w.lambda_cls > 0.0))
                    .collect();
                for r in &reg_only {
                    for c in &cls_only {
                        need(
                            r.mean_ap50 >= c.mean_ap50,
                            format!("{} AP {:.4} < {} AP {:.4}", r.setting, r.mean_ap50, c.setting, c.mean_ap50),
                        );
                    }
                }
            }
            _ => {}
        }
        fails
    }
}

/// Inverse of [`LossWeights::key`].
pub fn parse_lambda_key(key: &str) -> Option<LossWeights> {
    let mut vals = [None; 3];
    for part in key.split(';') {
        let (name, v) = part.split_once('=')?;
        let slot = ["cls", "reg", "star"].iter().position(|n| *n == name)?;
        vals[slot] = Some(v.parse::<f64>().ok()?);
    }
    LossWeights::new(vals[0]?, vals[1]?, vals[2]?).ok()
}

fn summary_json(o: &RunOutcome) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(&json!({
        "command": o.command,
        "run_id": o.run_id,
        "spec_hash": o.spec_hash,
        "groups": o.summary,
        "check_failures": o.failures,
    }))?)
}

#[derive(Serialize)]
struct FractionRow {
    fraction: f64,
    mean_ap50: f64,
    std_ap50: f64,
}

#[derive(Serialize)]
struct LambdaRow {
    lambda_cls: f64,
    lambda_reg: f64,
    lambda_star: f64,
    mean_ap50: f64,
    std_ap50: f64,
    n_seeds: usize,
}

#[derive(Serialize)]
struct CapacityRow {
    preset: String,
    params: usize,
    mean_ap50: f64,
    std_ap50: f64,
    n_seeds: usize,
}

/// Writes `summary.csv` plus whichever sweep tables the rows support.
pub fn write_tables(summary: &[SummaryRow], dir: &Path) -> CliResult<()> {
    write_csv_atomic(&dir.join("summary.csv"), summary)?;
    let fractions = sweep_points(summary, Command::SweepFraction.as_str(), "fraction");
    if !fractions.is_empty() {
        let table: Vec<FractionRow> = fractions
            .iter()
            .map(|&(fraction, mean_ap50, std_ap50)| FractionRow { fraction, mean_ap50, std_ap50 })
            .collect();
        write_csv_atomic(&dir.join("fraction_summary.csv"), &table)?;
        write_text_atomic(&dir.join("fraction_plot.svg"), &line_plot_svg(&fractions, "train fraction", "AP50"))?;
    }
    let lambdas: Vec<LambdaRow> = summary
        .iter()
        .filter(|s| s.experiment == Command::SweepLambda.as_str())
        .filter_map(|s| {
            let w = parse_lambda_key(&s.setting)?;
            Some(LambdaRow {
                lambda_cls: w.lambda_cls,
                lambda_reg: w.lambda_reg,
                lambda_star: w.lambda_star,
                mean_ap50: s.mean_ap50,
                std_ap50: s.std_ap50,
                n_seeds: s.n_seeds,
            })
        })
        .collect();
    if !lambdas.is_empty() {
        write_csv_atomic(&dir.join("lambda_summary.csv"), &lambdas)?;
    }
    let capacity: Vec<CapacityRow> = summary
        .iter()
        .filter(|s| s.experiment == Command::SweepCapacity.as_str())
        .filter_map(|s| {
            let preset = setting_value(&s.setting, "preset")?;
            let cfg = HalluciNetConfig::preset(preset).ok()?;
            Some(CapacityRow {
                preset: preset.to_string(),
                params: count_params(&cfg),
                mean_ap50: s.mean_ap50,
                std_ap50: s.std_ap50,
                n_seeds: s.n_seeds,
            })
        })
        .collect();
    if !capacity.is_empty() {
        write_csv_atomic(&dir.join("capacity_summary.csv"), &capacity)?;
    }
    Ok(())
}
