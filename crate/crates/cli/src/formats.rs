//! Line-oriented text formats: token corpora, acoustic token grids,
//! synthesis prompts, and evaluation reports. Everything round-trips
//! losslessly.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use maskcodec_core::acoustic_codec::AcousticTokenGrid;
use maskcodec_core::duration::DurationExample;
use maskcodec_core::s2a::S2aExample;
use maskcodec_core::t2s::T2sExample;

fn parse_ids(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|tok| tok.parse::<u32>().map_err(|_| anyhow!("bad token id `{tok}`")))
        .collect()
}

fn join_ids(ids: &[u32]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

// ---- text-to-semantic corpus: "TEXT_IDS | SEMANTIC_IDS" per line ------

pub fn write_t2s_corpus(path: &Path, examples: &[T2sExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let _ = writeln!(out, "{} | {}", join_ids(&ex.text), join_ids(&ex.semantic));
    }
    write_file(path, &out)
}

pub fn read_t2s_corpus(path: &Path) -> Result<Vec<T2sExample>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in non_empty_lines(&text) {
        let (l, r) = line
            .split_once('|')
            .ok_or_else(|| anyhow!("line {i}: expected `TEXT_IDS | SEMANTIC_IDS`"))?;
        let ex = T2sExample { text: parse_ids(l)?, semantic: parse_ids(r)? };
        if ex.semantic.is_empty() {
            bail!("line {i}: empty semantic sequence");
        }
        out.push(ex);
    }
    Ok(out)
}

// ---- duration corpus: "PHONE_IDS | DURATIONS" (integer frames) --------

pub fn write_duration_corpus(path: &Path, examples: &[DurationExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        let durs: Vec<String> = ex.durations.iter().map(|d| (*d as u64).to_string()).collect();
        let _ = writeln!(out, "{} | {}", join_ids(&ex.phones), durs.join(" "));
    }
    write_file(path, &out)
}

pub fn read_duration_corpus(path: &Path) -> Result<Vec<DurationExample>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in non_empty_lines(&text) {
        let (l, r) = line
            .split_once('|')
            .ok_or_else(|| anyhow!("line {i}: expected `PHONE_IDS | DURATIONS`"))?;
        let phones = parse_ids(l)?;
        let durations: Vec<f32> = parse_ids(r)?.into_iter().map(|d| d as f32).collect();
        if phones.len() != durations.len() || phones.is_empty() {
            bail!("line {i}: phones and durations must be nonempty and equal length");
        }
        if durations.iter().any(|&d| d < 1.0) {
            bail!("line {i}: durations must be at least one frame");
        }
        out.push(DurationExample { phones, durations });
    }
    Ok(out)
}

// ---- acoustic token grid: header line plus one row per layer ----------

pub fn grid_to_string(grid: &AcousticTokenGrid) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "layers={} frames={}", grid.layers(), grid.frames());
    for l in 0..grid.layers() {
        let _ = writeln!(out, "{}", join_ids(grid.layer_row(l)));
    }
    out
}

pub fn write_grid(path: &Path, grid: &AcousticTokenGrid) -> Result<()> {
    write_file(path, &grid_to_string(grid))
}

/// Parse one grid from an iterator of lines; consumes exactly
/// `layers + 1` lines.
fn parse_grid<'a>(
    header: &str,
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
) -> Result<AcousticTokenGrid> {
    let (layers, frames) = parse_grid_header(header)?;
    let mut grid = AcousticTokenGrid::zeros(layers, frames);
    for l in 0..layers {
        let (i, line) = lines
            .next()
            .ok_or_else(|| anyhow!("grid truncated: expected {layers} layer rows"))?;
        let row = parse_ids(line)?;
        if row.len() != frames {
            bail!("line {i}: layer row has {} tokens, expected {frames}", row.len());
        }
        grid.set_layer_row(l, &row);
    }
    Ok(grid)
}

fn parse_grid_header(line: &str) -> Result<(usize, usize)> {
    let mut layers = None;
    let mut frames = None;
    for part in line.split_whitespace() {
        if let Some(v) = part.strip_prefix("layers=") {
            layers = Some(v.parse::<usize>().context("bad layers= value")?);
        } else if let Some(v) = part.strip_prefix("frames=") {
            frames = Some(v.parse::<usize>().context("bad frames= value")?);
        } else {
            bail!("unexpected grid header token `{part}`");
        }
    }
    match (layers, frames) {
        (Some(l), Some(f)) => Ok((l, f)),
        _ => bail!("grid header must name layers= and frames="),
    }
}

pub fn read_grid(path: &Path) -> Result<AcousticTokenGrid> {
    let text = read_file(path)?;
    let mut lines = non_empty_lines(&text);
    let (_, header) = lines.next().ok_or_else(|| anyhow!("empty grid file"))?;
    let grid = parse_grid(header, &mut lines)?;
    if lines.next().is_some() {
        bail!("trailing content after grid");
    }
    Ok(grid)
}

// ---- semantic-to-acoustic corpus: per record, a semantic line then a
// ---- grid block; frame alignment is checked on read and write --------

pub fn write_s2a_corpus(path: &Path, examples: &[S2aExample]) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        ex.validate();
        let _ = writeln!(out, "{}", join_ids(&ex.semantic));
        out.push_str(&grid_to_string(&ex.grid));
    }
    write_file(path, &out)
}

pub fn read_s2a_corpus(path: &Path) -> Result<Vec<S2aExample>> {
    let text = read_file(path)?;
    let mut lines = non_empty_lines(&text).peekable();
    let mut out = Vec::new();
    while let Some((i, sem_line)) = lines.next() {
        let semantic = parse_ids(sem_line)?;
        let (_, header) = lines
            .next()
            .ok_or_else(|| anyhow!("line {i}: record missing its grid header"))?;
        let grid = parse_grid(header, &mut lines)?;
        if semantic.len() != grid.frames() {
            bail!(
                "record at line {i}: semantic length {} != grid frames {}",
                semantic.len(),
                grid.frames()
            );
        }
        out.push(S2aExample { semantic, grid });
    }
    Ok(out)
}

// ---- synthesis prompt: duration record, semantic ids, acoustic grid ---

/// Everything a zero-shot synthesis call conditions on.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub phones: Vec<u32>,
    pub durations: Vec<f32>,
    pub semantic: Vec<u32>,
    pub grid: AcousticTokenGrid,
}

impl PromptRecord {
    pub fn validate(&self) -> Result<()> {
        if self.phones.len() != self.durations.len() {
            bail!("prompt phones and durations differ in length");
        }
        if self.semantic.len() != self.grid.frames() {
            bail!("prompt semantic length != prompt grid frames");
        }
        Ok(())
    }
}

pub fn write_prompt(path: &Path, p: &PromptRecord) -> Result<()> {
    p.validate()?;
    let durs: Vec<String> = p.durations.iter().map(|d| (*d as u64).to_string()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "{} | {}", join_ids(&p.phones), durs.join(" "));
    let _ = writeln!(out, "{}", join_ids(&p.semantic));
    out.push_str(&grid_to_string(&p.grid));
    write_file(path, &out)
}

pub fn read_prompt(path: &Path) -> Result<PromptRecord> {
    let text = read_file(path)?;
    let mut raw_lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, dur_line) = raw_lines.next().ok_or_else(|| anyhow!("empty prompt file"))?;
    let (l, r) = dur_line
        .split_once('|')
        .ok_or_else(|| anyhow!("prompt line 1 must be `PHONES | DURATIONS`"))?;
    let phones = parse_ids(l)?;
    let durations: Vec<f32> = parse_ids(r)?.into_iter().map(|d| d as f32).collect();
    let (_, sem_line) = raw_lines.next().ok_or_else(|| anyhow!("prompt missing semantic line"))?;
    let semantic = parse_ids(sem_line)?;
    let mut rest = raw_lines.filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = rest.next().ok_or_else(|| anyhow!("prompt missing grid"))?;
    let grid = parse_grid(header, &mut rest)?;
    let p = PromptRecord { phones, durations, semantic, grid };
    p.validate()?;
    Ok(p)
}

// ---- evaluation report -------------------------------------------------

/// Key=value metrics plus an optional machine-readable sweep table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub token_accuracy: Option<f64>,
    pub exact_match: Option<f64>,
    pub grid_exact_match: Option<f64>,
    pub per_layer_accuracy: Option<Vec<f64>>,
    pub codebook_utilization: Option<usize>,
    pub recon_l1_per_dim: Option<f64>,
    pub duration_mean_rel_err: Option<f64>,
    pub duration_within_10pct: Option<f64>,
    pub end_to_end_exact_match: Option<f64>,
    pub predicted_length_within_10pct: Option<f64>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub steps: usize,
    pub token_accuracy: f64,
    pub exact_match: f64,
}

impl EvalReport {
    /// Equality over everything except wall-clock, which is the one
    /// field two identical runs legitimately disagree on.
    pub fn content_eq(&self, other: &EvalReport) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_clock_secs = 0.0;
        b.wall_clock_secs = 0.0;
        a == b
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format=eval-report-v1");
        let _ = writeln!(out, "config_hash={}", self.config_hash);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "wall_clock_secs={:.3}", self.wall_clock_secs);
        if let Some(v) = self.token_accuracy {
            let _ = writeln!(out, "token_accuracy={v}");
        }
        if let Some(v) = self.exact_match {
            let _ = writeln!(out, "exact_match={v}");
        }
        if let Some(v) = self.grid_exact_match {
            let _ = writeln!(out, "grid_exact_match={v}");
        }
        if let Some(v) = &self.per_layer_accuracy {
            let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "per_layer_accuracy={}", items.join(","));
        }
        if let Some(v) = self.codebook_utilization {
            let _ = writeln!(out, "codebook_utilization={v}");
        }
        if let Some(v) = self.recon_l1_per_dim {
            let _ = writeln!(out, "recon_l1_per_dim={v}");
        }
        if let Some(v) = self.duration_mean_rel_err {
            let _ = writeln!(out, "duration_mean_rel_err={v}");
        }
        if let Some(v) = self.duration_within_10pct {
            let _ = writeln!(out, "duration_within_10pct={v}");
        }
        if let Some(v) = self.end_to_end_exact_match {
            let _ = writeln!(out, "end_to_end_exact_match={v}");
        }
        if let Some(v) = self.predicted_length_within_10pct {
            let _ = writeln!(out, "predicted_length_within_10pct={v}");
        }
        if !self.sweep.is_empty() {
            let _ = writeln!(out, "[sweep]");
            let _ = writeln!(out, "steps\ttoken_accuracy\texact_match");
            for row in &self.sweep {
                let _ = writeln!(out, "{}\t{}\t{}", row.steps, row.token_accuracy, row.exact_match);
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<EvalReport> {
        let mut report = EvalReport::default();
        let mut in_sweep = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "[sweep]" {
                in_sweep = true;
                continue;
            }
            if in_sweep {
                if line.starts_with("steps\t") {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    bail!("sweep line {}: expected 3 columns", i + 1);
                }
                report.sweep.push(SweepRow {
                    steps: cols[0].parse()?,
                    token_accuracy: cols[1].parse()?,
                    exact_match: cols[2].parse()?,
                });
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("report line {}: expected key=value", i + 1))?;
            match k {
                "format" => {
                    if v != "eval-report-v1" {
                        bail!("unknown report format `{v}`");
                    }
                }
                "config_hash" => report.config_hash = v.to_string(),
                "seed" => report.seed = v.parse()?,
                "wall_clock_secs" => report.wall_clock_secs = v.parse()?,
                "token_accuracy" => report.token_accuracy = Some(v.parse()?),
                "exact_match" => report.exact_match = Some(v.parse()?),
                "grid_exact_match" => report.grid_exact_match = Some(v.parse()?),
                "per_layer_accuracy" => {
                    report.per_layer_accuracy = Some(
                        v.split(',')
                            .map(|x| x.parse::<f64>())
                            .collect::<std::result::Result<_, _>>()?,
                    )
                }
                "codebook_utilization" => report.codebook_utilization = Some(v.parse()?),
                "recon_l1_per_dim" => report.recon_l1_per_dim = Some(v.parse()?),
                "duration_mean_rel_err" => report.duration_mean_rel_err = Some(v.parse()?),
                "duration_within_10pct" => report.duration_within_10pct = Some(v.parse()?),
                "end_to_end_exact_match" => report.end_to_end_exact_match = Some(v.parse()?),
                "predicted_length_within_10pct" => {
                    report.predicted_length_within_10pct = Some(v.parse()?)
                }
                other => bail!("report line {}: unknown key `{other}`", i + 1),
            }
        }
        Ok(report)
    }
}

// ---- loss curves and token lines --------------------------------------

pub fn write_loss_curve(path: &Path, points: &[(u64, f32)]) -> Result<()> {
    let mut out = String::from("step loss\n");
    for (step, loss) in points {
        let _ = writeln!(out, "{step} {loss}");
    }
    write_file(path, &out)
}

pub fn write_token_line(path: &Path, tokens: &[u32]) -> Result<()> {
    write_file(path, &format!("{}\n", join_ids(tokens)))
}

pub fn read_token_line(path: &Path) -> Result<Vec<u32>> {
    let text = read_file(path)?;
    let line = text.lines().next().unwrap_or("");
    parse_ids(line)
}

// ---- helpers -----------------------------------------------------------

fn non_empty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t2s_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let examples = vec![
            T2sExample { text: vec![0, 1, 2], semantic: vec![5, 6, 7, 8] },
            T2sExample { text: vec![3], semantic: vec![9, 9] },
        ];
        write_t2s_corpus(&path, &examples).unwrap();
        assert_eq!(read_t2s_corpus(&path).unwrap(), examples);
    }

    #[test]
    fn duration_corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        let examples = vec![DurationExample { phones: vec![1, 2], durations: vec![5.0, 9.0] }];
        write_duration_corpus(&path, &examples).unwrap();
        assert_eq!(read_duration_corpus(&path).unwrap(), examples);
    }

    #[test]
    fn grid_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        let mut grid = AcousticTokenGrid::zeros(3, 4);
        for l in 0..3 {
            for f in 0..4 {
                grid.set(l, f, (l * 4 + f) as u32);
            }
        }
        write_grid(&path, &grid).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("layers=3 frames=4\n"));
        assert_eq!(read_grid(&path).unwrap(), grid);
    }

    #[test]
    fn s2a_corpus_checks_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.txt");
        std::fs::write(&path, "1 2 3\nlayers=2 frames=2\n0 1\n2 3\n").unwrap();
        assert!(read_s2a_corpus(&path).is_err());
        std::fs::write(&path, "1 2\nlayers=2 frames=2\n0 1\n2 3\n").unwrap();
        let got = read_s2a_corpus(&path).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].semantic, vec![1, 2]);
        assert_eq!(got[0].grid.layer_row(1), &[2, 3]);
    }

    #[test]
    fn prompt_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let grid = AcousticTokenGrid::new(2, 3, vec![1, 2, 3, 4, 5, 6]);
        let p = PromptRecord {
            phones: vec![0, 1],
            durations: vec![2.0, 4.0],
            semantic: vec![7, 8, 9],
            grid,
        };
        write_prompt(&path, &p).unwrap();
        assert_eq!(read_prompt(&path).unwrap(), p);
    }

    #[test]
    fn eval_report_round_trips_losslessly() {
        let report = EvalReport {
            config_hash: "abc".into(),
            seed: 7,
            wall_clock_secs: 1.25,
            token_accuracy: Some(0.983),
            exact_match: Some(0.96),
            grid_exact_match: Some(0.91),
            per_layer_accuracy: Some(vec![0.99, 0.97]),
            codebook_utilization: Some(23),
            recon_l1_per_dim: Some(0.031),
            duration_mean_rel_err: Some(0.04),
            duration_within_10pct: Some(0.95),
            end_to_end_exact_match: Some(0.9),
            predicted_length_within_10pct: Some(0.92),
            sweep: vec![
                SweepRow { steps: 5, token_accuracy: 0.52, exact_match: 0.1 },
                SweepRow { steps: 25, token_accuracy: 0.99, exact_match: 0.97 },
            ],
        };
        let text = report.to_text();
        let back = EvalReport::from_text(&text).unwrap();
        assert_eq!(report, back);
        assert!(report.content_eq(&back));
        let mut other = back.clone();
        other.wall_clock_secs = 99.0;
        assert!(report.content_eq(&other));
        other.seed = 8;
        assert!(!report.content_eq(&other));
    }
}
