use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rscope_core::classify::{classify, reconstruct, relative_error};
use rscope_core::library::{observe_library, read_library, write_library, ObservedLibrary, RegimeLibrary};
use rscope_core::metrics::{
    coherence_report, confusion_with, estimate_epsilon, eta_alignment, gamma_matrix, kappa_matrix,
    mu_b_vs_augmentation, prop1_certificate, run_trials, CoherenceReport, ConfusionConfig, Subspaces,
};
use rscope_core::sensing::{make_sensing, measure, SensingConfig, SensingOperator};
use rscope_core::snapshots::{FieldGrid, SnapshotMatrix};
use rscope_core::synthgen::{committed_suite, SuiteConfig};
use rscope_core::{Error, Execution, Result};

use crate::config::Experiment;
use crate::data::{create_dir, write_suite, DataDir};

/// Buffered CSV writer for one output file.
struct Table {
    path: String,
    w: csv::Writer<BufWriter<File>>,
}

impl Table {
    fn create(dir: &Path, name: &str, header: &[String]) -> Result<Self> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut t = Self {
            path: path.display().to_string(),
            w: csv::Writer::from_writer(BufWriter::new(file)),
        };
        t.row(header)?;
        Ok(t)
    }

    fn row<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        self.w
            .write_record(fields)
            .map_err(|e| Error::Format(format!("{}: {e}", self.path)))
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })
    }
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn num(v: f64) -> String {
    v.to_string()
}

fn snr_field(snr: Option<f64>) -> String {
    snr.map_or_else(|| "inf".into(), num)
}

fn write_csv_file(dir: &Path, name: &str, f: impl FnOnce(BufWriter<File>) -> Result<()>) -> Result<()> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    f(BufWriter::new(file))
}

fn out_dir(exp: &Experiment) -> Result<&Path> {
    let out = exp.out()?;
    create_dir(out)?;
    Ok(out)
}

/// Grid of the data, needed by grid-aware sensing kinds.
fn data_grid(exp: &Experiment) -> Result<Option<FieldGrid>> {
    let Some(dir) = &exp.data else {
        return Ok(None);
    };
    let data = DataDir::open(dir)?;
    let first = data.training()?.into_iter().next();
    Ok(first.and_then(|d| d.snapshots.grid().cloned()))
}

fn sensing_for(config: &SensingConfig, lib: &RegimeLibrary, grid: Option<&FieldGrid>) -> Result<SensingOperator> {
    make_sensing(config, lib.state_dim(), grid)
}

fn load_tests(exp: &Experiment, lib: &RegimeLibrary) -> Result<Vec<SnapshotMatrix>> {
    let tests = DataDir::open(exp.data()?)?.test_sets(exp.held_out)?;
    for t in &tests {
        if t.state_dim() != lib.state_dim() {
            return Err(Error::Dimension(format!(
                "test set {:?} has dimension {}, library has {}",
                t.label(),
                t.state_dim(),
                lib.state_dim()
            )));
        }
        lib.check_dt(t.dt())?;
    }
    Ok(tests)
}

pub fn synth(exp: &Experiment, suite: Option<&Path>, out: &Path, exec: Execution) -> Result<()> {
    let cfg = match suite.or(exp.suite.as_deref()) {
        Some(path) => SuiteConfig::read(path)?,
        None => committed_suite(),
    };
    create_dir(out)?;
    let manifest = write_suite(&cfg, out, exec)?;
    println!("wrote {} data sets to {}", manifest.sets.len(), out.display());
    Ok(())
}

pub fn build_lib(exp: &Experiment, out: &Path, exec: Execution) -> Result<()> {
    let data = DataDir::open(exp.data()?)?;
    let policy = match (&exp.rank_policy, &data.manifest.rank_policy) {
        (Some(p), _) => *p,
        (None, Some(text)) => text.parse()?,
        (None, None) => return Err(Error::Argument("no rank policy given (--rank-policy or config)".into())),
    };
    let lib = rscope_core::library::build_library(&data.training()?, &policy, exec)?;
    write_library(out, &lib)?;
    for e in lib.entries() {
        println!(
            "{}: rank {}, energy {:.6}",
            e.label,
            e.model.rank(),
            e.model.energy_captured()
        );
        for w in e.model.warnings() {
            eprintln!("warning: {}: {w}", e.label);
        }
    }
    Ok(())
}

fn write_coherence(dir: &Path, name: &str, rows: &[(usize, CoherenceReport)]) -> Result<()> {
    let mut t = Table::create(
        dir,
        name,
        &strings(&["j", "mu_b", "nu", "r_block", "blocks", "bound", "bound_satisfied"]),
    )?;
    for (j, c) in rows {
        t.row(&[
            j.to_string(),
            num(c.mu_b),
            num(c.nu),
            c.r_block.to_string(),
            c.blocks.to_string(),
            num(c.bound),
            c.bound_satisfied.to_string(),
        ])?;
    }
    t.finish()
}

/// Coherence needs equal block sizes; other libraries just skip it.
fn coherence_or_warn(obs: &ObservedLibrary) -> Result<Option<CoherenceReport>> {
    match coherence_report(obs) {
        Ok(c) => Ok(Some(c)),
        Err(Error::Argument(msg)) => {
            eprintln!("warning: coherence skipped: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

pub fn observe(exp: &Experiment, exec: Execution) -> Result<()> {
    let lib = read_library(exp.library()?)?;
    let op = sensing_for(&exp.sensing, &lib, data_grid(exp)?.as_ref())?;
    let obs = observe_library(&lib, &op, exp.j, exec)?;
    let out = out_dir(exp)?;
    write_csv_file(out, "sensing.csv", |w| op.write_csv(w))?;
    let mut t = Table::create(out, "observed.csv", &strings(&["label", "rows", "columns", "rank", "flag"]))?;
    for e in obs.entries() {
        t.row(&[
            e.label.clone(),
            e.theta.nrows().to_string(),
            e.columns().to_string(),
            e.rank.to_string(),
            e.flag().unwrap_or_default(),
        ])?;
    }
    t.finish()?;
    if let Some(c) = coherence_or_warn(&obs)? {
        write_coherence(out, "coherence.csv", &[(exp.j, c)])?;
    }
    for f in obs.flags() {
        eprintln!("warning: {f}");
    }
    Ok(())
}

fn norm_header(base: &[&str], prefix: &str, labels: &[String]) -> Vec<String> {
    let mut h = strings(base);
    h.extend(labels.iter().map(|l| format!("{prefix}{l}")));
    h
}

pub fn classify_cmd(exp: &Experiment, exec: Execution) -> Result<()> {
    let lib = read_library(exp.library()?)?;
    let tests = load_tests(exp, &lib)?;
    let op = sensing_for(&exp.sensing, &lib, tests[0].grid())?;
    let obs = observe_library(&lib, &op, exp.j, exec)?;
    let reports = run_trials(&tests, exp.trials, exp.j, exp.seed, exec, |draw, window| {
        let y = measure(&op, window, exp.snr_db, draw.noise_seed)?;
        Ok((draw.start, classify(&obs, &y.values)?))
    })?;
    let labels = obs.labels();
    let out = out_dir(exp)?;
    let mut t = Table::create(
        out,
        "classifications.csv",
        &norm_header(&["test_set", "trial", "start", "winner"], "norm_", &labels),
    )?;
    for (test, rows) in tests.iter().zip(&reports) {
        let hits = rows.iter().filter(|(_, r)| r.winner_label() == test.label()).count();
        for (trial, (start, report)) in rows.iter().enumerate() {
            let mut rec = vec![
                test.label().to_string(),
                trial.to_string(),
                start.to_string(),
                report.winner_label().to_string(),
            ];
            rec.extend(report.projection_norms.iter().map(|&v| num(v)));
            t.row(&rec)?;
        }
        println!("{}: {hits}/{} classified to the regime of the same label", test.label(), rows.len());
    }
    t.finish()
}

pub fn reconstruct_cmd(exp: &Experiment, exec: Execution) -> Result<()> {
    let lib = read_library(exp.library()?)?;
    let tests = load_tests(exp, &lib)?;
    let op = sensing_for(&exp.sensing, &lib, tests[0].grid())?;
    let obs = observe_library(&lib, &op, exp.j, exec)?;
    let d = lib.len();
    let results = run_trials(&tests, exp.trials, exp.j, exp.seed, exec, |draw, window| {
        let y = measure(&op, window, exp.snr_db, draw.noise_seed)?;
        let per_regime = (0..d)
            .map(|k| {
                let rec = reconstruct(&lib, &obs, k, &y.values)?;
                Ok((relative_error(&rec.states, window)?, rec.imag_residual, rec.flag))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((draw.start, per_regime))
    })?;
    let labels = lib.labels();
    let out = out_dir(exp)?;
    let mut t = Table::create(
        out,
        "reconstruction.csv",
        &strings(&["test_set", "trial", "start", "regime", "relative_error", "imag_residual", "flag"]),
    )?;
    let mut summary = Table::create(
        out,
        "reconstruction_summary.csv",
        &strings(&["test_set", "regime", "mean_relative_error", "strictly_best_share"]),
    )?;
    for (test, rows) in tests.iter().zip(&results) {
        let mut sums = vec![0.0; d];
        let mut best = vec![0usize; d];
        for (trial, (start, per_regime)) in rows.iter().enumerate() {
            for (k, (err, imag, flag)) in per_regime.iter().enumerate() {
                sums[k] += err;
                if per_regime.iter().enumerate().all(|(i, (e, _, _))| i == k || e > err) {
                    best[k] += 1;
                }
                t.row(&[
                    test.label().to_string(),
                    trial.to_string(),
                    start.to_string(),
                    labels[k].clone(),
                    num(*err),
                    num(*imag),
                    flag.clone().unwrap_or_default(),
                ])?;
            }
        }
        let n = rows.len() as f64;
        for k in 0..d {
            summary.row(&[
                test.label().to_string(),
                labels[k].clone(),
                num(sums[k] / n),
                num(best[k] as f64 / n),
            ])?;
        }
    }
    t.finish()?;
    summary.finish()
}

pub fn metrics(exp: &Experiment, exec: Execution) -> Result<()> {
    let lib = read_library(exp.library()?)?;
    let out = out_dir(exp)?;
    let full = Subspaces::from_library(&lib)?;
    let (eta, eta_max) = eta_alignment(&full)?;
    write_csv_file(out, "eta.csv", |w| eta.write_csv(w))?;
    write_csv_file(out, "gamma.csv", |w| gamma_matrix(&full)?.write_csv(w))?;
    let mut cert = Table::create(out, "certificate.csv", &strings(&["space", "eta", "epsilon", "certified"]))?;
    let mut grid = None;
    if let Some(dir) = &exp.data {
        let training = DataDir::open(dir)?.training()?;
        grid = training.first().and_then(|d| d.snapshots.grid().cloned());
        let labels: Vec<String> = training.iter().map(|d| d.label.clone()).collect();
        if labels != lib.labels() {
            return Err(Error::Argument(format!(
                "data sets {labels:?} do not match library regimes {:?}",
                lib.labels()
            )));
        }
        let data: Vec<_> = training.iter().map(|d| d.snapshots.data().clone()).collect();
        write_csv_file(out, "kappa.csv", |w| kappa_matrix(&full, &data)?.write_csv(w))?;
        let eps = estimate_epsilon(&full, &data)?;
        let c = prop1_certificate(&full, eps)?;
        cert.row(&["full".to_string(), num(c.eta), num(eps), c.certified.to_string()])?;
    } else {
        cert.row(&["full".to_string(), num(eta_max), String::new(), String::new()])?;
    }
    if exp.sensing_given {
        let op = sensing_for(&exp.sensing, &lib, grid.as_ref())?;
        let obs = observe_library(&lib, &op, exp.j, exec)?;
        let observed = Subspaces::from_observed(&obs)?;
        let (eta_obs, eta_obs_max) = eta_alignment(&observed)?;
        write_csv_file(out, "eta_observed.csv", |w| eta_obs.write_csv(w))?;
        write_csv_file(out, "gamma_observed.csv", |w| gamma_matrix(&observed)?.write_csv(w))?;
        cert.row(&["observed".to_string(), num(eta_obs_max), String::new(), String::new()])?;
        if let Some(c) = coherence_or_warn(&obs)? {
            write_coherence(out, "coherence.csv", &[(exp.j, c)])?;
        }
    }
    cert.finish()?;
    for f in &full.flags {
        eprintln!("warning: {f}");
    }
    println!("eta (full space) = {eta_max}");
    Ok(())
}

pub fn confusion(exp: &Experiment, exec: Execution) -> Result<()> {
    let lib = read_library(exp.library()?)?;
    let tests = load_tests(exp, &lib)?;
    let op = sensing_for(&exp.sensing, &lib, tests[0].grid())?;
    let obs = observe_library(&lib, &op, exp.j, exec)?;
    let config = ConfusionConfig {
        sensing: exp.sensing.clone(),
        trials: exp.trials,
        snr_db: exp.snr_db,
        j: exp.j,
        seed: exp.seed,
    };
    let m = confusion_with(&obs, &op, &tests, &config, exec)?;
    let out = out_dir(exp)?;
    write_csv_file(out, "confusion.csv", |w| m.write_csv(w))
}

pub fn mu_b_sweep(exp: &Experiment, exec: Execution) -> Result<()> {
    let lib = read_library(exp.library()?)?;
    let op = sensing_for(&exp.sensing, &lib, data_grid(exp)?.as_ref())?;
    let depths: Vec<usize> = (0..=exp.j).collect();
    let rows = mu_b_vs_augmentation(&lib, &op, &depths, exec)?;
    write_coherence(out_dir(exp)?, "mu_b.csv", &rows)
}

/// Grid values of a sweep; empty lists fall back to the experiment's value.
pub struct SweepGrid {
    pub p: Vec<usize>,
    pub pt: Vec<usize>,
    pub pv: Vec<usize>,
    pub j: Vec<usize>,
    pub snr_db: Vec<f64>,
}

fn or_default<T: Copy>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

pub fn sweep(exp: &Experiment, grid: &SweepGrid, exec: Execution) -> Result<()> {
    let lib = read_library(exp.library()?)?;
    let tests = load_tests(exp, &lib)?;
    let snrs: Vec<Option<f64>> = if grid.snr_db.is_empty() {
        vec![exp.snr_db]
    } else {
        grid.snr_db.iter().map(|&x| (x != f64::INFINITY).then_some(x)).collect()
    };
    let out = out_dir(exp)?;
    let mut t = Table::create(
        out,
        "sweep.csv",
        &strings(&["sensing", "p", "p_t", "p_v", "j", "snr_db", "test_set", "regime", "percentage"]),
    )?;
    let labels = lib.labels();
    for p in or_default(&grid.p, exp.sensing.p) {
        for pt in or_default(&grid.pt, exp.sensing.p_t) {
            for pv in or_default(&grid.pv, exp.sensing.p_v) {
                let sensing = SensingConfig {
                    p,
                    p_t: pt,
                    p_v: pv,
                    ..exp.sensing.clone()
                };
                let op = sensing_for(&sensing, &lib, tests[0].grid())?;
                for j in or_default(&grid.j, exp.j) {
                    let obs = observe_library(&lib, &op, j, exec)?;
                    for &snr in &snrs {
                        let config = ConfusionConfig {
                            sensing: sensing.clone(),
                            trials: exp.trials,
                            snr_db: snr,
                            j,
                            seed: exp.seed,
                        };
                        let m = confusion_with(&obs, &op, &tests, &config, exec)?;
                        for (i, test) in tests.iter().enumerate() {
                            for (k, label) in labels.iter().enumerate() {
                                t.row(&[
                                    sensing.kind.to_string(),
                                    p.to_string(),
                                    pt.to_string(),
                                    pv.to_string(),
                                    j.to_string(),
                                    snr_field(snr),
                                    test.label().to_string(),
                                    label.clone(),
                                    num(m.percentages[(i, k)]),
                                ])?;
                            }
                        }
                    }
                }
            }
        }
    }
    t.finish()
}
