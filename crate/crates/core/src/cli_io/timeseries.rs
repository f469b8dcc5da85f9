use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::CliIoError;
use crate::netmodel::Phase;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const CSV_HEADER: [&str; 5] = ["timestamp", "node_id", "phase", "demand_kw", "pv_kw"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSeries {
    pub node_id: u32,
    pub phase: Phase,
    pub demand_kw: Vec<f64>,
    pub pv_kw: Vec<f64>,
}

/// Uniformly sampled demand and PV series for a set of prosumers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSet {
    /// Timestamp of sample 0 (timezone-naive local time).
    pub start: NaiveDateTime,
    pub resolution_min: i64,
    pub nodes: Vec<NodeSeries>,
}

impl TimeSeriesSet {
    pub fn len(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.demand_kw.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.resolution_min * i as i64)
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.resolution_min) as usize
    }

    /// Index of `t` on this set's grid, if it falls on a sample.
    pub fn index_of(&self, t: NaiveDateTime) -> Option<usize> {
        let mins = (t - self.start).num_minutes();
        if mins < 0 || mins % self.resolution_min != 0 {
            return None;
        }
        let i = (mins / self.resolution_min) as usize;
        (i < self.len()).then_some(i)
    }

    pub fn node(&self, id: u32) -> Option<&NodeSeries> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Block-mean aggregation by an integer factor (e.g. 15 for 1 → 15 min).
    pub fn downsample(&self, factor: usize) -> TimeSeriesSet {
        assert!(factor >= 1);
        let agg = |v: &[f64]| v.chunks_exact(factor).map(|c| c.iter().sum::<f64>() / factor as f64).collect();
        TimeSeriesSet {
            start: self.start,
            resolution_min: self.resolution_min * factor as i64,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSeries {
                    node_id: n.node_id,
                    phase: n.phase,
                    demand_kw: agg(&n.demand_kw),
                    pv_kw: agg(&n.pv_kw),
                })
                .collect(),
        }
    }

    /// Samples `[lo, hi)` of every node.
    pub fn slice(&self, lo: usize, hi: usize) -> TimeSeriesSet {
        TimeSeriesSet {
            start: self.timestamp(lo),
            resolution_min: self.resolution_min,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSeries {
                    node_id: n.node_id,
                    phase: n.phase,
                    demand_kw: n.demand_kw[lo..hi].to_vec(),
                    pv_kw: n.pv_kw[lo..hi].to_vec(),
                })
                .collect(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), CliIoError> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| CliIoError::io(path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file)).map_err(|e| CliIoError::io(path, e))
    }

    pub fn write_csv_to<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for i in 0..self.len() {
            let ts = self.timestamp(i).format(TIMESTAMP_FORMAT).to_string();
            for n in &self.nodes {
                w.write_record([
                    ts.as_str(),
                    &n.node_id.to_string(),
                    &n.phase.to_string(),
                    &fmt_sig6(n.demand_kw[i]),
                    &fmt_sig6(n.pv_kw[i]),
                ])?;
            }
        }
        w.flush()
    }
}

/// Shortest decimal form of `x` rounded to 6 significant digits.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Resolution of the file in minutes.
    pub file_resolution_min: i64,
    /// Requested output resolution (a multiple of the file resolution).
    pub resolution_min: i64,
    /// Longest run of missing samples that is filled by interpolation.
    pub max_gap_steps: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { file_resolution_min: 1, resolution_min: 1, max_gap_steps: 5 }
    }
}

/// Reads a time-series CSV, checks schema, signs and gaps, fills short gaps
/// linearly and aggregates to the requested resolution.
pub fn ingest_timeseries(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<TimeSeriesSet, CliIoError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| CliIoError::io(path, e))?;
    ingest_reader(file, opts)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, opts: &IngestOptions) -> Result<TimeSeriesSet, CliIoError> {
    if opts.file_resolution_min <= 0 || opts.resolution_min % opts.file_resolution_min != 0 {
        return Err(CliIoError::Schema(format!(
            "resolution {} min is not a multiple of file resolution {} min",
            opts.resolution_min, opts.file_resolution_min
        )));
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| CliIoError::Csv(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(CliIoError::Schema(format!("expected header {:?}, found {:?}", CSV_HEADER, header)));
    }
    struct Raw {
        phase: Phase,
        points: Vec<(NaiveDateTime, f64, f64)>,
    }
    let mut by_node: BTreeMap<u32, Raw> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliIoError::Csv(e.to_string()))?;
        let at = |k: usize| rec.get(k).unwrap_or("");
        let row = line + 2;
        let ts = NaiveDateTime::parse_from_str(at(0), TIMESTAMP_FORMAT)
            .map_err(|e| CliIoError::Schema(format!("row {row}: bad timestamp {:?}: {e}", at(0))))?;
        let node: u32 = at(1).parse().map_err(|_| CliIoError::Schema(format!("row {row}: bad node_id {:?}", at(1))))?;
        let phase =
            Phase::parse(at(2)).ok_or_else(|| CliIoError::Schema(format!("row {row}: bad phase {:?}", at(2))))?;
        let num = |k: usize, name: &str| -> Result<f64, CliIoError> {
            let v: f64 = at(k).parse().map_err(|_| CliIoError::Schema(format!("row {row}: bad {name} {:?}", at(k))))?;
            if !v.is_finite() {
                return Err(CliIoError::Schema(format!("row {row}: non-finite {name}")));
            }
            if v < 0.0 {
                return Err(CliIoError::Negative {
                    node,
                    timestamp: at(0).to_string(),
                    column: name.to_string(),
                    value: v,
                });
            }
            Ok(v)
        };
        let d = num(3, "demand_kw")?;
        let p = num(4, "pv_kw")?;
        let entry = by_node.entry(node).or_insert(Raw { phase, points: Vec::new() });
        if entry.phase != phase {
            return Err(CliIoError::Schema(format!("row {row}: node {node} changes phase")));
        }
        entry.points.push((ts, d, p));
    }
    if by_node.is_empty() {
        return Err(CliIoError::Schema("no data rows".into()));
    }

    let res = opts.file_resolution_min;
    let start = by_node.values().map(|r| r.points.iter().map(|p| p.0).min().unwrap()).min().unwrap();
    let end = by_node.values().map(|r| r.points.iter().map(|p| p.0).max().unwrap()).max().unwrap();
    let n = ((end - start).num_minutes() / res) as usize + 1;
    let mut nodes = Vec::with_capacity(by_node.len());
    let mut gap_errors = Vec::new();
    for (id, mut raw) in by_node {
        raw.points.sort_by_key(|p| p.0);
        let mut demand = vec![f64::NAN; n];
        let mut pv = vec![f64::NAN; n];
        for (ts, d, p) in raw.points {
            let mins = (ts - start).num_minutes();
            if mins % res != 0 {
                return Err(CliIoError::Schema(format!("node {id}: timestamp {ts} off the {res}-minute grid")));
            }
            let k = (mins / res) as usize;
            if !demand[k].is_nan() {
                return Err(CliIoError::Schema(format!("node {id}: duplicate timestamp {ts}")));
            }
            demand[k] = d;
            pv[k] = p;
        }
        let mut i = 0;
        while i < n {
            if !demand[i].is_nan() {
                i += 1;
                continue;
            }
            let lo = i;
            while i < n && demand[i].is_nan() {
                i += 1;
            }
            let hi = i; // missing [lo, hi)
            let len = hi - lo;
            if len > opts.max_gap_steps || lo == 0 || hi == n {
                let fmt = |k: usize| (start + Duration::minutes(res * k as i64)).format(TIMESTAMP_FORMAT).to_string();
                gap_errors.push((id, fmt(lo), fmt(hi - 1)));
                continue;
            }
            for series in [&mut demand, &mut pv] {
                let (a, b) = (series[lo - 1], series[hi]);
                for k in lo..hi {
                    let f = (k - lo + 1) as f64 / (len + 1) as f64;
                    series[k] = a + f * (b - a);
                }
            }
        }
        nodes.push(NodeSeries { node_id: id, phase: raw.phase, demand_kw: demand, pv_kw: pv });
    }
    if !gap_errors.is_empty() {
        return Err(CliIoError::Gaps(gap_errors));
    }
    let set = TimeSeriesSet { start, resolution_min: res, nodes };
    let factor = (opts.resolution_min / res) as usize;
    Ok(if factor > 1 { set.downsample(factor) } else { set })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn sample(n: usize) -> TimeSeriesSet {
        TimeSeriesSet {
            start: NaiveDate::from_ymd_opt(2022, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            resolution_min: 1,
            nodes: vec![
                NodeSeries { node_id: 1, phase: Phase::A, demand_kw: vec![4.0; n], pv_kw: vec![0.0; n] },
                NodeSeries {
                    node_id: 2,
                    phase: Phase::C,
                    demand_kw: (0..n).map(|i| 0.123456789 * i as f64).collect(),
                    pv_kw: vec![1.5; n],
                },
            ],
        }
    }

    fn to_string(s: &TimeSeriesSet) -> String {
        let mut buf = Vec::new();
        s.write_csv_to(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn roundtrip_within_six_digits() {
        let s = sample(30);
        let text = to_string(&s);
        assert!(text.starts_with("timestamp,node_id,phase,demand_kw,pv_kw\n"));
        let back = ingest_reader(text.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(back.len(), 30);
        for (a, b) in s.nodes.iter().zip(&back.nodes) {
            for (x, y) in a.demand_kw.iter().zip(&b.demand_kw) {
                assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn downsample_constant() {
        let text = to_string(&sample(30));
        let opts = IngestOptions { resolution_min: 15, ..IngestOptions::default() };
        let s = ingest_reader(text.as_bytes(), &opts).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.resolution_min, 15);
        assert_eq!(s.nodes[0].demand_kw, vec![4.0, 4.0]);
    }

    #[test]
    fn long_gap_is_reported() {
        let s = sample(400);
        let text = to_string(&s);
        // drop three hours (180 rows of node 1) starting at 01:00
        let kept: Vec<&str> = text
            .lines()
            .filter(|l| {
                let mut f = l.split(',');
                let ts = f.next().unwrap();
                let node = f.next().unwrap();
                !(node == "1" && ts >= "2022-07-01T01:00:00" && ts < "2022-07-01T04:00:00")
            })
            .collect();
        match ingest_reader(kept.join("\n").as_bytes(), &IngestOptions::default()) {
            Err(CliIoError::Gaps(g)) => {
                assert_eq!(g, vec![(1, "2022-07-01T01:00:00".to_string(), "2022-07-01T03:59:00".to_string())]);
            }
            other => panic!("expected gap error, got {other:?}"),
        }
    }

    #[test]
    fn short_gap_is_filled() {
        let text = to_string(&sample(20));
        let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("2022-07-01T00:05:00,2")).collect();
        let s = ingest_reader(kept.join("\n").as_bytes(), &IngestOptions::default()).unwrap();
        let d = &s.nodes[1].demand_kw;
        assert!((d[5] - 0.5 * (d[4] + d[6])).abs() < 1e-9);
    }

    #[test]
    fn schema_and_sign_errors() {
        assert!(matches!(
            ingest_reader("a,b\n1,2\n".as_bytes(), &IngestOptions::default()),
            Err(CliIoError::Schema(_))
        ));
        let neg = "timestamp,node_id,phase,demand_kw,pv_kw\n2022-07-01T00:00:00,1,A,-1,0\n";
        assert!(matches!(ingest_reader(neg.as_bytes(), &IngestOptions::default()), Err(CliIoError::Negative { .. })));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(fmt_sig6(0.123456789), "0.123457");
        assert_eq!(fmt_sig6(1234567.0), "1234570");
        assert_eq!(fmt_sig6(0.0), "0");
        assert_eq!(fmt_sig6(4.0), "4");
    }
}
