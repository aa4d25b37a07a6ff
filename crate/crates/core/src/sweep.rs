//! Runs every (policy, seed) pair of a config and writes CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::controller::{Policy, QTables};
use crate::engine::{RunReport, Simulation};
use crate::error::Result;
use crate::fleet::Tier;

pub const ROUNDS_CSV_VERSION: u32 = 1;
pub const SUMMARY_CSV_VERSION: u32 = 1;

pub const ROUNDS_HEADER: &str =
    "round,policy,seed,t_round_s,energy_j,accuracy_pct,excluded,sel_h,sel_m,sel_l,act_cpu,act_gpu,reward_mean";
pub const SUMMARY_HEADER: &str = "policy,seed,rounds,converged_round,final_accuracy_pct,total_energy_j,\
energy_to_target_j,ppw_basis,ppw,normalized_ppw,prediction_accuracy";

/// Per-round CSV of one run.
pub fn rounds_csv(report: &RunReport, fleet: &crate::fleet::Fleet) -> String {
    let mut out = format!("# fedsim rounds v{ROUNDS_CSV_VERSION}\n{ROUNDS_HEADER}\n");
    for o in &report.outcomes {
        let hist = fleet.histogram(&o.plan.selected());
        let (cpu, gpu) = o.plan.processor_counts();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.2},{},{},{},{},{},{},{:.6}",
            o.round,
            report.policy,
            report.seed,
            o.t_round,
            o.total_energy(),
            o.accuracy,
            o.excluded.len(),
            hist.get(Tier::H),
            hist.get(Tier::M),
            hist.get(Tier::L),
            cpu,
            gpu,
            o.mean_reward(),
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpwBasis {
    /// Inverse energy to reach the target.
    Convergence,
    /// Rounds per joule over the whole run.
    PerRound,
}

impl PpwBasis {
    fn label(self) -> &'static str {
        match self {
            PpwBasis::Convergence => "convergence",
            PpwBasis::PerRound => "per-round",
        }
    }

    fn ppw(self, report: &RunReport) -> Option<f64> {
        match self {
            PpwBasis::Convergence => report.ppw_convergence(),
            PpwBasis::PerRound => report.ppw_per_round(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub policy: Policy,
    pub seed: u64,
    pub rounds: usize,
    pub converged_round: Option<usize>,
    pub final_accuracy: f64,
    pub total_energy: f64,
    pub energy_to_target: Option<f64>,
    pub basis: PpwBasis,
    pub ppw: Option<f64>,
    /// Relative to the random policy on the same seed, on a shared basis.
    pub normalized_ppw: Option<f64>,
    pub prediction_accuracy: Option<f64>,
}

/// Convergence PPW when both runs reached the target, per-round PPW otherwise.
pub fn summarize(report: &RunReport, baseline: Option<&RunReport>) -> SummaryRow {
    let both_converged = report.convergence_round.is_some() && baseline.is_none_or(|b| b.convergence_round.is_some());
    let basis = if both_converged {
        PpwBasis::Convergence
    } else {
        PpwBasis::PerRound
    };
    let ppw = basis.ppw(report);
    let normalized_ppw = match (ppw, baseline.and_then(|b| basis.ppw(b))) {
        (Some(p), Some(b)) if b > 0.0 => Some(p / b),
        _ => None,
    };
    SummaryRow {
        policy: report.policy,
        seed: report.seed,
        rounds: report.rounds(),
        converged_round: report.convergence_round,
        final_accuracy: report.final_accuracy(),
        total_energy: report.total_energy(),
        energy_to_target: report.energy_to_convergence(),
        basis,
        ppw,
        normalized_ppw,
        prediction_accuracy: report.prediction_accuracy(),
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}")).unwrap_or_default()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("# fedsim summary v{SUMMARY_CSV_VERSION}\n{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.2},{:.6},{},{},{},{},{}",
            r.policy,
            r.seed,
            r.rounds,
            opt(r.converged_round),
            r.final_accuracy,
            r.total_energy,
            opt_f(r.energy_to_target, 6),
            r.basis.label(),
            opt_f(r.ppw, 9),
            opt_f(r.normalized_ppw, 6),
            opt_f(r.prediction_accuracy, 4),
        );
    }
    out
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run_file_name(policy: Policy, seed: u64) -> String {
    format!("{policy}_seed{seed}.csv")
}

#[derive(Debug)]
pub struct SweepOutput {
    pub reports: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
}

/// Runs all pairs in parallel and writes one CSV per run plus `summary.csv`.
pub fn run_sweep(config: &ExperimentConfig, out_dir: &Path) -> Result<SweepOutput> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let jobs: Vec<(u64, Policy)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.policies.iter().map(move |&p| (s, p)))
        .collect();
    let scenarios = config
        .seeds
        .par_iter()
        .map(|&s| config.scenario(s).map(|sc| (s, sc)))
        .collect::<Result<Vec<_>>>()?;

    let runs = jobs
        .par_iter()
        .map(|&(seed, policy)| -> Result<(RunReport, PathBuf, Option<PathBuf>)> {
            let scenario = &scenarios.iter().find(|(s, _)| *s == seed).expect("scenario per seed").1;
            let mut sim = Simulation::new(scenario, policy, seed)?;
            if let (Policy::AutoFl, Some(path)) = (policy, &config.warm_start) {
                let mut tables = if scenario.learner.shared_tables {
                    QTables::shared(&scenario.fleet, seed)
                } else {
                    QTables::per_device(&scenario.fleet, seed)
                };
                tables.read_csv(BufReader::new(fs::File::open(path)?))?;
                sim = sim.with_tables(tables);
            }
            log::info!("running {policy} seed {seed}");
            let (report, tables) = sim.run(config.max_rounds)?;
            let path = out_dir.join(run_file_name(policy, seed));
            write_atomic(&path, rounds_csv(&report, &scenario.fleet).as_bytes())?;
            let mut qpath = None;
            if let (true, Some(t)) = (config.dump_qtables, tables) {
                let p = out_dir.join(format!("{policy}_seed{seed}_qtable.csv"));
                let mut buf = Vec::new();
                t.write_csv(&mut buf)?;
                write_atomic(&p, &buf)?;
                qpath = Some(p);
            }
            log::info!(
                "{policy} seed {seed}: {} rounds, accuracy {:.2}%, converged {:?}",
                report.rounds(),
                report.final_accuracy(),
                report.convergence_round
            );
            Ok((report, path, qpath))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files = Vec::new();
    let mut reports = Vec::new();
    for (report, path, qpath) in runs {
        files.push(path);
        files.extend(qpath);
        reports.push(report);
    }
    let summary: Vec<SummaryRow> = reports
        .iter()
        .map(|r| {
            let baseline = reports.iter().find(|b| b.policy == Policy::Random && b.seed == r.seed);
            summarize(r, baseline)
        })
        .collect();
    let summary_path = out_dir.join("summary.csv");
    write_atomic(&summary_path, summary_csv(&summary).as_bytes())?;
    files.push(summary_path);
    Ok(SweepOutput {
        reports,
        summary,
        files,
    })
}
