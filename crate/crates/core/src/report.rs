//! CSV metrics files and static SVG line charts.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::NUM_CLASSES;
use crate::engine::{MetricsRecord, Phase, Stratum};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed metrics CSV at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("no metrics to report")]
    Empty,
    #[error("bad plot selector `{0}`")]
    BadSelector(String),
    #[error("series `{0}` has no data in the metrics table")]
    UnknownSeries(String),
}

/// Column names of the metrics CSV, in order.
pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = ["round", "phase", "device", "cum_steps"].map(String::from).to_vec();
    h.extend((0..NUM_CLASSES).map(|c| format!("class{c}")));
    h.extend(
        ["seen_acc", "unseen_acc", "overall_acc", "train_loss", "consensus_gap"].map(String::from),
    );
    h
}

fn fixed(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

fn csv_row(r: &MetricsRecord) -> Vec<String> {
    let mut row = vec![
        r.round.to_string(),
        r.phase.name().to_string(),
        r.device.to_string(),
        r.cum_steps.to_string(),
    ];
    row.extend(r.per_class_acc.iter().map(|&a| fixed(a)));
    row.extend([r.seen_acc, r.unseen_acc, r.overall_acc, r.train_loss].map(fixed));
    row.push(fixed(Some(r.consensus_gap)));
    row
}

fn sorted(records: &[MetricsRecord]) -> Vec<&MetricsRecord> {
    let mut rows: Vec<&MetricsRecord> = records.iter().collect();
    rows.sort_by_key(|r| (r.round, r.phase, r.device));
    rows
}

/// Streams rows to a CSV sink one at a time, so a run that aborts still
/// leaves every finished row on disk.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    pub fn new(out: W) -> std::io::Result<Self> {
        let mut writer = csv::Writer::from_writer(out);
        writer.write_record(csv_header()).map_err(std::io::Error::other)?;
        Ok(Self { writer })
    }

    pub fn push(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        self.writer.write_record(csv_row(r)).map_err(std::io::Error::other)?;
        self.writer.flush()
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.writer.flush()?;
        self.writer.into_inner().map_err(|e| e.into_error())
    }
}

/// Header plus one row per record, ordered by (round, phase, device), floats
/// with six decimals and an empty field for an absent value.
pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> std::io::Result<()> {
    let mut sink = CsvSink::new(out)?;
    for r in sorted(records) {
        sink.push(r)?;
    }
    sink.finish().map(|_| ())
}

pub fn to_csv_string(records: &[MetricsRecord]) -> String {
    let mut buf = Vec::new();
    write_csv(records, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("CSV output is ASCII")
}

pub fn emit_csv(records: &[MetricsRecord], path: &Path) -> Result<(), ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let werr = |source| ReportError::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(werr)?;
    write_csv(records, std::io::BufWriter::new(file)).map_err(werr)
}

pub fn parse_csv<R: Read>(input: R) -> Result<Vec<MetricsRecord>, ReportError> {
    let mut reader = csv::Reader::from_reader(input);
    let bad = |line: u64, message: String| ReportError::Csv { line, message };
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(1, e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != csv_header() {
        return Err(bad(1, format!("unexpected header {}", header.join(","))));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let int = |i: usize| {
            field(i)
                .parse::<u64>()
                .map_err(|_| bad(line, format!("column {} is not an integer: `{}`", csv_header()[i], field(i))))
        };
        let opt = |i: usize| -> Result<Option<f64>, ReportError> {
            let f = field(i);
            if f.is_empty() {
                return Ok(None);
            }
            f.parse::<f64>()
                .map(Some)
                .map_err(|_| bad(line, format!("column {} is not a number: `{f}`", csv_header()[i])))
        };
        let phase: Phase = field(1).parse().map_err(|e: String| bad(line, e))?;
        let mut per_class = [None; NUM_CLASSES];
        for (c, slot) in per_class.iter_mut().enumerate() {
            *slot = opt(4 + c)?;
        }
        let k = 4 + NUM_CLASSES;
        out.push(MetricsRecord {
            round: int(0)? as usize,
            phase,
            device: int(2)? as usize,
            cum_steps: int(3)?,
            per_class_acc: per_class,
            seen_acc: opt(k)?,
            unseen_acc: opt(k + 1)?,
            overall_acc: opt(k + 2)?,
            train_loss: opt(k + 3)?,
            consensus_gap: opt(k + 4)?.ok_or_else(|| bad(line, "consensus_gap is empty".into()))?,
        });
    }
    Ok(out)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRecord>, ReportError> {
    let file = std::fs::File::open(path).map_err(|source| ReportError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(std::io::BufReader::new(file))
}

/// Device, or an aggregate over all devices present at each point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceSel {
    Id(usize),
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Stratum(Stratum),
    Class(u8),
}

/// Which evaluation points a series uses. `Both` interleaves post-learning
/// and post-consensus points, which draws the sawtooth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseSel {
    Both,
    Only(Phase),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeriesSpec {
    pub device: DeviceSel,
    pub metric: Metric,
    pub phase: PhaseSel,
}

impl SeriesSpec {
    pub fn label(&self) -> String {
        let device = match self.device {
            DeviceSel::Id(d) => format!("device {d}"),
            DeviceSel::Mean => "mean".into(),
            DeviceSel::Min => "min".into(),
            DeviceSel::Max => "max".into(),
        };
        let metric = match self.metric {
            Metric::Stratum(s) => s.name().to_string(),
            Metric::Class(c) => format!("class {c}"),
        };
        match self.phase {
            PhaseSel::Both => format!("{device} {metric}"),
            PhaseSel::Only(p) => format!("{device} {metric} ({p})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Rounds,
    /// Cumulative local gradient steps.
    Iterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub series: Vec<SeriesSpec>,
    pub x_axis: XAxis,
    pub title: Option<String>,
}

/// Parses a selector such as
/// `device=0,stratum=unseen;device=0,stratum=seen;x=iterations`.
///
/// Series are separated by `;` and hold `key=value` pairs: `device` (an id,
/// `mean`, `min` or `max`; default 0), `stratum` (`seen`, `unseen`,
/// `overall` or `class0`..`class9`; default `overall`) and `phase` (`both`,
/// `post_learning` or `post_consensus`; default `both`). A segment holding
/// only `x=rounds|iterations` or `title=...` sets the axis or the title.
pub fn parse_selector(text: &str) -> Result<PlotSpec, ReportError> {
    let bad = || ReportError::BadSelector(text.to_string());
    let mut spec = PlotSpec {
        series: Vec::new(),
        x_axis: XAxis::Rounds,
        title: None,
    };
    for segment in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some(x) = segment.strip_prefix("x=") {
            spec.x_axis = match x.trim() {
                "rounds" => XAxis::Rounds,
                "iterations" => XAxis::Iterations,
                _ => return Err(bad()),
            };
            continue;
        }
        if let Some(t) = segment.strip_prefix("title=") {
            spec.title = Some(t.trim().to_string());
            continue;
        }
        let mut s = SeriesSpec {
            device: DeviceSel::Id(0),
            metric: Metric::Stratum(Stratum::Overall),
            phase: PhaseSel::Both,
        };
        for pair in segment.split(',') {
            let (key, value) = pair.split_once('=').ok_or_else(bad)?;
            let value = value.trim();
            match key.trim() {
                "device" => {
                    s.device = match value {
                        "mean" => DeviceSel::Mean,
                        "min" => DeviceSel::Min,
                        "max" => DeviceSel::Max,
                        id => DeviceSel::Id(id.parse().map_err(|_| bad())?),
                    }
                }
                "stratum" => {
                    s.metric = match value.strip_prefix("class") {
                        Some(c) => Metric::Class(
                            c.parse().ok().filter(|&c: &u8| (c as usize) < NUM_CLASSES).ok_or_else(bad)?,
                        ),
                        None => Metric::Stratum(value.parse().map_err(|_| bad())?),
                    }
                }
                "phase" => {
                    s.phase = match value {
                        "both" => PhaseSel::Both,
                        p => PhaseSel::Only(p.parse().map_err(|_| bad())?),
                    }
                }
                _ => return Err(bad()),
            }
        }
        spec.series.push(s);
    }
    if spec.series.is_empty() {
        return Err(bad());
    }
    Ok(spec)
}

/// Rounds a value the way the CSV stores it, so a plot of parsed metrics is
/// identical to a plot of the in-memory ones.
fn as_stored(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

fn metric_of(r: &MetricsRecord, m: Metric) -> Option<f64> {
    match m {
        Metric::Stratum(s) => r.stratum(s),
        Metric::Class(c) => r.per_class_acc[c as usize],
    }
}

/// Steps per round, recovered from any record past round 0.
fn steps_per_round(records: &[MetricsRecord]) -> f64 {
    records
        .iter()
        .find(|r| r.round > 0)
        .map_or(1.0, |r| r.cum_steps as f64 / r.round as f64)
}

/// Points of one series in round units. A round's post-learning point sits
/// half a round before its post-consensus point.
pub fn series_points(records: &[MetricsRecord], s: &SeriesSpec) -> Vec<(f64, f64)> {
    let keep = |p: Phase| match s.phase {
        PhaseSel::Both => true,
        PhaseSel::Only(q) => p == q || (p == Phase::Init && q == Phase::PostConsensus),
    };
    let mut groups: std::collections::BTreeMap<(usize, Phase), Vec<f64>> = Default::default();
    for r in records {
        if !keep(r.phase) {
            continue;
        }
        if let DeviceSel::Id(d) = s.device {
            if r.device != d {
                continue;
            }
        }
        if let Some(v) = metric_of(r, s.metric) {
            groups.entry((r.round, r.phase)).or_default().push(as_stored(v));
        }
    }
    groups
        .into_iter()
        .map(|((round, phase), vals)| {
            let x = match phase {
                Phase::PostLearning => round as f64 - 0.5,
                _ => round as f64,
            };
            let y = match s.device {
                DeviceSel::Id(_) => vals[0],
                DeviceSel::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
                DeviceSel::Min => vals.iter().cloned().fold(f64::INFINITY, f64::min),
                DeviceSel::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            };
            (x, y)
        })
        .collect()
}

/// Pixel geometry of the chart; the plot box spans `[left, right]` by
/// `[top, bottom]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub width: f64,
    pub height: f64,
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
    pub x_max: f64,
}

impl Frame {
    fn new(x_max: f64) -> Self {
        Self {
            width: 760.0,
            height: 440.0,
            left: 60.0,
            right: 560.0,
            top: 40.0,
            bottom: 390.0,
            x_max: x_max.max(1.0),
        }
    }

    pub fn x(&self, v: f64) -> f64 {
        self.left + (self.right - self.left) * v / self.x_max
    }

    /// Accuracy `0..=1` maps linearly from the bottom edge to the top edge.
    pub fn y(&self, v: f64) -> f64 {
        self.bottom - (self.bottom - self.top) * v
    }
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// A step of 1, 2 or 5 times a power of ten giving at most ten ticks.
fn tick_step(max: f64) -> f64 {
    let raw = max / 10.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Chart geometry for `records` under `spec`, without drawing.
pub fn frame_for(records: &[MetricsRecord], spec: &PlotSpec) -> Frame {
    let scale = match spec.x_axis {
        XAxis::Rounds => 1.0,
        XAxis::Iterations => steps_per_round(records),
    };
    let rounds = records.iter().map(|r| r.round).max().unwrap_or(0) as f64;
    Frame::new(rounds * scale)
}

pub fn render_svg(records: &[MetricsRecord], spec: &PlotSpec) -> Result<String, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let scale = match spec.x_axis {
        XAxis::Rounds => 1.0,
        XAxis::Iterations => steps_per_round(records),
    };
    let frame = frame_for(records, spec);
    let mut lines = Vec::with_capacity(spec.series.len());
    for s in &spec.series {
        let pts = series_points(records, s);
        if pts.is_empty() {
            return Err(ReportError::UnknownSeries(s.label()));
        }
        lines.push(pts);
    }

    let mut svg = String::new();
    let (w, h) = (frame.width, frame.height);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if let Some(t) = &spec.title {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (frame.left + frame.right) / 2.0,
            escape(t)
        );
    }
    let _ = writeln!(
        svg,
        r##"<rect class="axes" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
        frame.left,
        frame.top,
        frame.right - frame.left,
        frame.bottom - frame.top
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = frame.y(v);
        let _ = writeln!(
            svg,
            r##"<line class="ytick" x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            frame.left,
            frame.right,
            frame.left - 6.0,
            y + 4.0
        );
    }
    let step = tick_step(frame.x_max);
    let mut t = 0.0;
    while t <= frame.x_max + 1e-9 {
        let x = frame.x(t);
        let _ = writeln!(
            svg,
            r##"<line class="xtick" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{t}</text>"##,
            frame.bottom,
            frame.bottom + 5.0,
            frame.bottom + 18.0
        );
        t += step;
    }
    let x_label = match spec.x_axis {
        XAxis::Rounds => "round",
        XAxis::Iterations => "training iterations",
    };
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x_label}</text>"#,
        (frame.left + frame.right) / 2.0,
        frame.bottom + 38.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18 {:.2}) rotate(-90)" text-anchor="middle">test accuracy</text>"#,
        (frame.top + frame.bottom) / 2.0
    );
    for (i, (s, pts)) in spec.series.iter().zip(&lines).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x * scale), frame.y(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = frame.top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line class="legend" x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            frame.right + 15.0,
            frame.right + 35.0,
            frame.right + 40.0,
            ly + 4.0,
            escape(&s.label())
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_svg(records: &[MetricsRecord], spec: &PlotSpec, path: &Path) -> Result<(), ReportError> {
    let svg = render_svg(records, spec)?;
    std::fs::write(path, svg).map_err(|source| ReportError::Write {
        path: path.to_path_buf(),
        source,
    })
}
