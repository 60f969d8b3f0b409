//! Double round-robin tournaments: scheduling, concurrent execution, the
//! loss-difference matrix, ranking and consistency checks, and report files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::arena::{train_pair_prepared, MatchResult, PreparedData, TrainConfig};
use crate::error::{Error, Result};
use crate::gnn::ModelSpec;
use crate::graph::Graph;

/// Salt mixed into the init seed of whichever model plays in the B slot, so
/// a self-match pits two differently initialised copies against each other.
pub const B_SLOT_SALT: u64 = 0xB5_1A7E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Competitor {
    pub name: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentPlan {
    pub pool: Vec<Competitor>,
    /// `(a, b)` pool indices, row-major over the `n x n` grid.
    pub schedule: Vec<(usize, usize)>,
    pub config: TrainConfig,
}

/// Every ordered pair plus every self-pair, row-major.
pub fn schedule_double_round_robin(pool: Vec<Competitor>, config: TrainConfig) -> Result<TournamentPlan> {
    if pool.is_empty() {
        return Err(Error::validation("tournament pool is empty"));
    }
    let mut seen = HashSet::new();
    for c in &pool {
        if !seen.insert(c.name.as_str()) {
            return Err(Error::validation(format!(
                "duplicate competitor name {:?}",
                c.name
            )));
        }
    }
    let n = pool.len();
    let schedule = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
    Ok(TournamentPlan {
        pool,
        schedule,
        config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum MatchOutcome {
    Completed(MatchResult),
    Aborted { reason: String, epoch: Option<usize> },
}

impl MatchOutcome {
    pub fn result(&self) -> Option<&MatchResult> {
        match self {
            MatchOutcome::Completed(r) => Some(r),
            MatchOutcome::Aborted { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub a: usize,
    pub b: usize,
    pub outcome: MatchOutcome,
}

/// Mean and sample std of a matrix cell; `None` marks an aborted match.
pub type Cell = Option<(f64, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub name: String,
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResidual {
    pub i: usize,
    pub j: usize,
    /// `|d_ij + d_ji|`.
    pub residual: f64,
    /// `sqrt((s_ij^2 + s_ji^2) / 2)`.
    pub pooled_std: f64,
}

impl PairResidual {
    pub fn ratio(&self) -> f64 {
        if self.residual == 0.0 {
            0.0
        } else {
            self.residual / self.pooled_std
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyFindings {
    pub antisymmetry: Vec<PairResidual>,
    pub max_antisymmetry_ratio: f64,
    pub max_self_play: f64,
    pub median_cross: f64,
    /// `max |d_ii|` over the median off-diagonal `|d_ij|`.
    pub self_play_ratio: f64,
    /// Ranked triples `(a, b, c)`, best first, where the outer margin
    /// `|m(a, c)|` fails to exceed both inner margins.
    pub violations: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentReport {
    pub names: Vec<String>,
    pub config: TrainConfig,
    pub matches: Vec<MatchRecord>,
    pub diff_matrix: Vec<Vec<Cell>>,
    pub ranking: Vec<RankEntry>,
    pub consistency: ConsistencyFindings,
}

impl TournamentReport {
    pub fn aborted(&self) -> impl Iterator<Item = &MatchRecord> {
        self.matches
            .iter()
            .filter(|m| matches!(m.outcome, MatchOutcome::Aborted { .. }))
    }

    pub fn means(&self) -> Vec<Vec<Option<f64>>> {
        means_of(&self.diff_matrix)
    }
}

fn means_of(matrix: &[Vec<Cell>]) -> Vec<Vec<Option<f64>>> {
    matrix
        .iter()
        .map(|row| row.iter().map(|c| c.map(|(m, _)| m)).collect())
        .collect()
}

/// Number of match workers: `GRAPHAC_WORKERS` if set and valid, else 1.
pub fn default_workers() -> usize {
    std::env::var("GRAPHAC_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}

/// Runs every scheduled match on up to `workers` threads. Results are keyed
/// by schedule index, so the report does not depend on completion order.
pub fn run_tournament(plan: &TournamentPlan, dataset: &[Graph], workers: usize) -> Result<TournamentReport> {
    plan.config.validate()?;
    for c in &plan.pool {
        c.spec
            .validate()
            .map_err(|e| Error::validation(format!("competitor {:?}: {e}", c.name)))?;
    }
    let data = PreparedData::new(dataset, &plan.config)?;
    let slots: Mutex<Vec<Option<MatchOutcome>>> = Mutex::new(vec![None; plan.schedule.len()]);
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, plan.schedule.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(a, b)) = plan.schedule.get(k) else {
                    break;
                };
                let outcome = play(plan, &data, a, b);
                slots.lock().expect("no worker panics while holding the lock")[k] = Some(outcome);
            });
        }
    });

    let outcomes = slots.into_inner().expect("workers joined");
    let matches: Vec<MatchRecord> = plan
        .schedule
        .iter()
        .zip(outcomes)
        .map(|(&(a, b), o)| MatchRecord {
            a,
            b,
            outcome: o.expect("every scheduled match ran"),
        })
        .collect();
    Ok(assemble(plan, matches))
}

fn play(plan: &TournamentPlan, data: &PreparedData<'_>, a: usize, b: usize) -> MatchOutcome {
    let (ca, cb) = (&plan.pool[a], &plan.pool[b]);
    let spec_b = cb.spec.clone().with_seed(cb.spec.init_seed ^ B_SLOT_SALT);
    log::info!("match {} vs {}", ca.name, cb.name);
    match train_pair_prepared(&ca.spec, &spec_b, data, &plan.config) {
        Ok(r) => {
            log::info!(
                "{} vs {}: {:+.4} ± {:.4}",
                ca.name,
                cb.name,
                r.diff_mean,
                r.diff_std
            );
            MatchOutcome::Completed(r)
        }
        Err(e) => {
            log::warn!("{} vs {} aborted: {e}", ca.name, cb.name);
            let epoch = match &e {
                Error::Collapse { epoch, .. } => Some(*epoch),
                _ => None,
            };
            MatchOutcome::Aborted {
                reason: e.to_string(),
                epoch,
            }
        }
    }
}

/// Builds matrix, ranking and consistency findings from finished matches.
pub fn assemble(plan: &TournamentPlan, matches: Vec<MatchRecord>) -> TournamentReport {
    let n = plan.pool.len();
    let mut diff_matrix = vec![vec![None; n]; n];
    for m in &matches {
        if let Some(r) = m.outcome.result() {
            diff_matrix[m.a][m.b] = Some((r.diff_mean, r.diff_std));
        }
    }
    let names: Vec<String> = plan.pool.iter().map(|c| c.name.clone()).collect();
    let ranking = extract_ranking(&names, &means_of(&diff_matrix));
    let consistency = check_consistency(&diff_matrix, &ranking);
    TournamentReport {
        names,
        config: plan.config.clone(),
        matches,
        diff_matrix,
        ranking,
        consistency,
    }
}

/// Margin of `i` over `j`: positive when `i` had the lower loss. Pools both
/// orders when available.
fn margin(means: &[Vec<Option<f64>>], i: usize, j: usize) -> Option<f64> {
    match (means[j][i], means[i][j]) {
        (Some(ji), Some(ij)) => Some((ji - ij) / 2.0),
        (Some(ji), None) => Some(ji),
        (None, Some(ij)) => Some(-ij),
        (None, None) => None,
    }
}

/// Scores each model by its mean margin over the others it has results
/// against; sorted by descending score, ties by name.
pub fn extract_ranking(names: &[String], means: &[Vec<Option<f64>>]) -> Vec<RankEntry> {
    let n = names.len();
    let mut entries: Vec<RankEntry> = (0..n)
        .map(|i| {
            let margins: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .filter_map(|j| margin(means, i, j))
                .collect();
            if margins.len() + 1 < n {
                log::warn!(
                    "{} scored over {} of {} opponents",
                    names[i],
                    margins.len(),
                    n - 1
                );
            }
            let score = if margins.is_empty() {
                0.0
            } else {
                margins.iter().sum::<f64>() / margins.len() as f64
            };
            RankEntry {
                rank: 0,
                name: names[i].clone(),
                index: i,
                score,
            }
        })
        .collect();
    entries.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.name.cmp(&b.name)));
    for (k, e) in entries.iter_mut().enumerate() {
        e.rank = k + 1;
    }
    entries
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

pub fn check_consistency(matrix: &[Vec<Cell>], ranking: &[RankEntry]) -> ConsistencyFindings {
    let n = matrix.len();
    let mut antisymmetry = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if let (Some((mij, sij)), Some((mji, sji))) = (matrix[i][j], matrix[j][i]) {
                antisymmetry.push(PairResidual {
                    i,
                    j,
                    residual: (mij + mji).abs(),
                    pooled_std: ((sij * sij + sji * sji) / 2.0).sqrt(),
                });
            }
        }
    }
    let max_antisymmetry_ratio = antisymmetry.iter().map(PairResidual::ratio).fold(0.0, f64::max);

    let max_self_play = (0..n)
        .filter_map(|i| matrix[i][i].map(|(m, _)| m.abs()))
        .fold(0.0, f64::max);
    let cross: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .filter_map(|(i, j)| matrix[i][j].map(|(m, _)| m.abs()))
        .collect();
    let median_cross = median(cross);
    let self_play_ratio = if max_self_play == 0.0 {
        0.0
    } else {
        max_self_play / median_cross
    };

    let means = means_of(matrix);
    let order: Vec<usize> = ranking.iter().map(|e| e.index).collect();
    let mut violations = Vec::new();
    for p in 0..order.len() {
        for q in p + 1..order.len() {
            for r in q + 1..order.len() {
                let (a, b, c) = (order[p], order[q], order[r]);
                let (Some(ab), Some(bc), Some(ac)) =
                    (margin(&means, a, b), margin(&means, b, c), margin(&means, a, c))
                else {
                    continue;
                };
                if !(ac.abs() > ab.abs() && ac.abs() > bc.abs()) {
                    violations.push((a, b, c));
                }
            }
        }
    }
    ConsistencyFindings {
        antisymmetry,
        max_antisymmetry_ratio,
        max_self_play,
        median_cross,
        self_play_ratio,
        violations,
    }
}

fn fmt_cell(cell: Cell) -> String {
    match cell {
        Some((m, s)) => format!("{m:.4}±{s:.4}"),
        None => "aborted".to_string(),
    }
}

/// `diff_matrix.csv` contents: a header of names, then one row per GNN_A.
pub fn diff_matrix_csv(names: &[String], matrix: &[Vec<Cell>]) -> String {
    let mut s = String::from("GNN_A\\GNN_B");
    for n in names {
        s.push(',');
        s.push_str(&csv_field(n));
    }
    s.push('\n');
    for (name, row) in names.iter().zip(matrix) {
        s.push_str(&csv_field(name));
        for &c in row {
            s.push(',');
            s.push_str(&fmt_cell(c));
        }
        s.push('\n');
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Parses [`diff_matrix_csv`] output back into names and cells.
pub fn parse_diff_matrix_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<Cell>>)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let names: Vec<String> = split_csv(header).into_iter().skip(1).collect();
    let mut matrix = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv(line);
        if fields.len() != names.len() + 1 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} fields, got {}", names.len() + 1, fields.len()),
            });
        }
        let row = fields[1..]
            .iter()
            .map(|f| parse_cell(f).map_err(|message| Error::Parse { line: i + 1, message }))
            .collect::<Result<Vec<_>>>()?;
        matrix.push(row);
    }
    Ok((names, matrix))
}

fn parse_cell(f: &str) -> std::result::Result<Cell, String> {
    if f == "aborted" {
        return Ok(None);
    }
    let (m, s) = f.split_once('±').ok_or_else(|| format!("bad cell {f:?}"))?;
    let m = m.parse().map_err(|_| format!("bad mean in {f:?}"))?;
    let s = s.parse().map_err(|_| format!("bad std in {f:?}"))?;
    Ok(Some((m, s)))
}

fn split_csv(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(ch) = chars.next() {
        match ch {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => out.push(std::mem::take(&mut cur)),
            _ => cur.push(ch),
        }
    }
    out.push(cur);
    out
}

pub fn ranking_csv(ranking: &[RankEntry]) -> String {
    let mut s = String::from("rank,name,score\n");
    for e in ranking {
        let _ = writeln!(s, "{},{},{:.6}", e.rank, csv_field(&e.name), e.score);
    }
    s
}

pub fn consistency_text(report: &TournamentReport) -> String {
    let c = &report.consistency;
    let names = &report.names;
    let mut s = String::new();
    let _ = writeln!(s, "anti-symmetry |d_ij + d_ji| / pooled std");
    for p in &c.antisymmetry {
        let _ = writeln!(
            s,
            "  {} / {}: residual {:.4}, pooled std {:.4}, ratio {:.3}",
            names[p.i],
            names[p.j],
            p.residual,
            p.pooled_std,
            p.ratio()
        );
    }
    let _ = writeln!(s, "max anti-symmetry ratio: {:.3}", c.max_antisymmetry_ratio);
    let _ = writeln!(
        s,
        "self-play: max |d_ii| {:.4}, median cross |d_ij| {:.4}, ratio {:.3}",
        c.max_self_play, c.median_cross, c.self_play_ratio
    );
    if c.violations.is_empty() {
        let _ = writeln!(s, "margin monotonicity: no violations");
    } else {
        let _ = writeln!(s, "margin monotonicity violations (best first):");
        for &(a, b, cc) in &c.violations {
            let _ = writeln!(s, "  {} > {} > {}", names[a], names[b], names[cc]);
        }
    }
    let aborted: Vec<_> = report.aborted().collect();
    if !aborted.is_empty() {
        let _ = writeln!(s, "aborted matches:");
        for m in aborted {
            if let MatchOutcome::Aborted { reason, .. } = &m.outcome {
                let _ = writeln!(s, "  {} vs {}: {reason}", names[m.a], names[m.b]);
            }
        }
    }
    s
}

pub fn report_markdown(report: &TournamentReport) -> String {
    let names = &report.names;
    let mut s = String::from("# Tournament report\n\n");
    s.push_str(
        "Loss differences L_GNN_A - L_GNN_B (rows: GNN_A, columns: GNN_B), mean ± std over seeds.\n\n",
    );
    s.push_str("| GNN_A \\ GNN_B |");
    for n in names {
        let _ = write!(s, " {n} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(names.len()));
    s.push('\n');
    for (name, row) in names.iter().zip(&report.diff_matrix) {
        let _ = write!(s, "| **{name}** |");
        for &c in row {
            let _ = write!(s, " {} |", fmt_cell(c));
        }
        s.push('\n');
    }
    s.push_str("\n*Loss differences between GNN_A and GNN_B; negative value means GNN_A wins.*\n\n");
    s.push_str("## Ranking\n\n| rank | name | score |\n|---|---|---|\n");
    for e in &report.ranking {
        let _ = writeln!(s, "| {} | {} | {:.4} |", e.rank, e.name, e.score);
    }
    s.push_str("\n## Consistency\n\n```\n");
    s.push_str(&consistency_text(report));
    s.push_str("```\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Diverging red/blue heatmap of matrix means, scaled to `±max|mean|`.
pub fn heatmap_svg(names: &[String], matrix: &[Vec<Cell>]) -> String {
    let n = names.len();
    let cell = 80.0;
    let margin = 140.0;
    let size = margin + cell * n as f64 + 20.0;
    let scale = matrix
        .iter()
        .flatten()
        .filter_map(|c| c.map(|(m, _)| m.abs()))
        .fold(0.0, f64::max);
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(
        s,
        "<title>Loss differences (negative value means GNN_A wins)</title>"
    );
    for (k, name) in names.iter().enumerate() {
        let pos = margin + cell * (k as f64 + 0.5);
        let name = xml_escape(name);
        let _ = writeln!(
            s,
            "<text x=\"{pos}\" y=\"{}\" text-anchor=\"middle\">{name}</text>",
            margin - 10.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{pos}\" text-anchor=\"end\">{name}</text>",
            margin - 10.0
        );
    }
    for (i, row) in matrix.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            let (x, y) = (margin + cell * j as f64, margin + cell * i as f64);
            let (fill, label) = match c {
                Some((m, _)) => {
                    let t = if scale > 0.0 {
                        (m / scale).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    };
                    // negative (A wins) shades blue, positive shades red
                    let fade = |v: f64| (255.0 * (1.0 - v.abs())).round() as u8;
                    let rgb = if t < 0.0 {
                        (fade(t), fade(t), 255)
                    } else {
                        (255, fade(t), fade(t))
                    };
                    (format!("rgb({},{},{})", rgb.0, rgb.1, rgb.2), format!("{m:.3}"))
                }
                None => ("rgb(200,200,200)".to_string(), "aborted".to_string()),
            };
            let _ = writeln!(
                s,
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"white\"/>"
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes every report artifact under `out_dir` and returns the paths.
pub fn emit_report(report: &TournamentReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let traj_dir = out_dir.join("matches");
    fs::create_dir_all(&traj_dir).map_err(|e| Error::io(&traj_dir, e))?;
    let names = &report.names;
    let mut written = vec![
        write(
            out_dir.join("diff_matrix.csv"),
            &diff_matrix_csv(names, &report.diff_matrix),
        )?,
        write(out_dir.join("ranking.csv"), &ranking_csv(&report.ranking))?,
        write(out_dir.join("consistency.txt"), &consistency_text(report))?,
        write(out_dir.join("report.md"), &report_markdown(report))?,
        write(
            out_dir.join("heatmap.svg"),
            &heatmap_svg(names, &report.diff_matrix),
        )?,
        write(
            out_dir.join("report.json"),
            &serde_json::to_string_pretty(report)?,
        )?,
    ];
    for (k, m) in report.matches.iter().enumerate() {
        if let Some(r) = m.outcome.result() {
            for run in &r.runs {
                let file = format!(
                    "{k:03}_{}_vs_{}_seed{}.csv",
                    file_stem(&names[m.a]),
                    file_stem(&names[m.b]),
                    run.seed
                );
                written.push(write(traj_dir.join(file), &MatchResult::trajectory_csv(run))?);
            }
        }
    }
    Ok(written)
}
