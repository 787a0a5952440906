//! Seeded synthetic grid data, CSV ingestion, masking and anomaly
//! injection.
//!
//! Each bus carries demand, solar and wind profiles. Net active injection
//! is `p = solar + wind − demand`, reactive injection follows a fixed 0.9
//! power factor, and voltage is the linear surrogate `v = 1 + M·p` with
//! `M = gain · D (L + I)⁻¹ D` built from the topology Laplacian `L` and a
//! random positive diagonal `D`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csvio::{self, field, fmt_f64, Table};
use crate::error::{Error, Result};
use crate::partition::{laplacian, ConnectivityGraph};
use crate::seeds;

pub const POWER_SIGMA: f64 = 1e-3;
pub const VOLTAGE_SIGMA: f64 = 1e-5;
pub const POWER_FACTOR: f64 = 0.9;
/// Gain of the voltage sensitivity matrix.
pub const VOLTAGE_GAIN: f64 = 0.05;

/// `q / p` at the fixed power factor, `tan(acos(0.9))`.
pub fn reactive_ratio() -> f64 {
    POWER_FACTOR.acos().tan()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Voltage,
    P,
    Q,
    Demand,
    Solar,
    Wind,
}

impl Kind {
    pub const ALL: [Kind; 6] = [
        Kind::Voltage,
        Kind::P,
        Kind::Q,
        Kind::Demand,
        Kind::Solar,
        Kind::Wind,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Voltage => "voltage",
            Kind::P => "p",
            Kind::Q => "q",
            Kind::Demand => "demand",
            Kind::Solar => "solar",
            Kind::Wind => "wind",
        }
    }

    pub fn default_sigma(self) -> f64 {
        match self {
            Kind::Voltage => VOLTAGE_SIGMA,
            _ => POWER_SIGMA,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown quantity kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub bus: usize,
    pub kind: Kind,
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bus{}/{}", self.bus, self.kind)
    }
}

/// Hourly series laid out as `hours × series` matrices; column `s` holds
/// `series[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDataset {
    pub topology: ConnectivityGraph,
    /// Sorted by bus, then kind.
    pub series: Vec<SeriesKey>,
    pub measured: DMatrix<f64>,
    pub observed: DMatrix<bool>,
    pub truth: Option<DMatrix<f64>>,
    pub noise: BTreeMap<Kind, f64>,
    /// Voltage sensitivity `M` (buses × buses) of synthetic data.
    pub sensitivity: Option<DMatrix<f64>>,
}

impl GridDataset {
    pub fn hours(&self) -> usize {
        self.measured.nrows()
    }

    pub fn buses(&self) -> usize {
        self.topology.n
    }

    pub fn index(&self, bus: usize, kind: Kind) -> Option<usize> {
        self.series.binary_search(&SeriesKey { bus, kind }).ok()
    }

    pub fn kinds_at(&self, bus: usize) -> Vec<Kind> {
        self.series
            .iter()
            .filter(|k| k.bus == bus)
            .map(|k| k.kind)
            .collect()
    }

    pub fn sigma(&self, kind: Kind) -> f64 {
        self.noise
            .get(&kind)
            .copied()
            .unwrap_or_else(|| kind.default_sigma())
    }

    pub fn observed_fraction(&self) -> f64 {
        let n = self.observed.len();
        if n == 0 {
            return 0.0;
        }
        self.observed.iter().filter(|&&o| o).count() as f64 / n as f64
    }

    /// Hours `[start, end)` as a dataset of their own.
    pub fn slice_hours(&self, start: usize, end: usize) -> Result<GridDataset> {
        if start >= end || end > self.hours() {
            return Err(Error::Domain(format!(
                "hour range {start}..{end} outside 0..{}",
                self.hours()
            )));
        }
        let rows = end - start;
        let cols = self.series.len();
        Ok(GridDataset {
            topology: self.topology.clone(),
            series: self.series.clone(),
            measured: self.measured.view((start, 0), (rows, cols)).clone_owned(),
            observed: self.observed.view((start, 0), (rows, cols)).clone_owned(),
            truth: self
                .truth
                .as_ref()
                .map(|t| t.view((start, 0), (rows, cols)).clone_owned()),
            noise: self.noise.clone(),
            sensitivity: self.sensitivity.clone(),
        })
    }

    fn validate(&self) -> Result<()> {
        let (h, s) = self.measured.shape();
        if s != self.series.len() || self.observed.shape() != (h, s) {
            return Err(Error::Domain("series matrices disagree in shape".into()));
        }
        if let Some(t) = &self.truth {
            if t.shape() != (h, s) {
                return Err(Error::Domain(
                    "ground truth shape differs from measurements".into(),
                ));
            }
        }
        if self.series.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain(
                "series keys must be sorted and unique".into(),
            ));
        }
        if let Some(k) = self.series.iter().find(|k| k.bus >= self.topology.n) {
            return Err(Error::Domain(format!(
                "series {k} refers to a bus outside the topology"
            )));
        }
        if let Some((k, s)) = self.noise.iter().find(|(_, &s)| !(s > 0.0)) {
            return Err(Error::Domain(format!(
                "noise sigma for {k} must be positive, got {s}"
            )));
        }
        Ok(())
    }
}

struct Profiles {
    demand: DMatrix<f64>,
    solar: DMatrix<f64>,
    wind: DMatrix<f64>,
}

fn random_topology(n: usize, rng: &mut ChaCha8Rng) -> Result<ConnectivityGraph> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    let extra = (0.15 * n as f64).ceil() as usize;
    let max_edges = n * (n - 1) / 2;
    let target = (edges.len() + extra).min(max_edges);
    let mut attempts = 0;
    while edges.len() < target && attempts < 100 * (extra + 1) {
        attempts += 1;
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        let e = (a.min(b), a.max(b));
        if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == e) {
            edges.push(e);
        }
    }
    ConnectivityGraph::new(n, edges)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn profiles(n: usize, hours: usize, rng: &mut ChaCha8Rng) -> Profiles {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let tau = std::f64::consts::TAU;
    let base: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.0)).collect();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let weekly: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.15)).collect();
    let solar_cap: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
    let wind_cap: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..0.6)).collect();

    let mut demand = DMatrix::zeros(hours, n);
    let mut solar = DMatrix::zeros(hours, n);
    let mut wind = DMatrix::zeros(hours, n);
    let mut demand_ar = vec![0.0; n];
    let mut cloud_local = vec![0.0; n];
    let mut wind_local = vec![0.0; n];
    let mut cloud = 0.0;
    let mut wind_front = 0.0;
    for t in 0..hours {
        let hour = (t % 24) as f64;
        let weekend = (t / 24) % 7 >= 5;
        let season = 1.0 + 0.2 * (tau * t as f64 / (24.0 * 365.0)).sin();
        let bell = if (6.0..=18.0).contains(&hour) {
            (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().powi(2)
        } else {
            0.0
        };
        cloud = 0.9 * cloud + 0.3 * unit.sample(rng);
        wind_front = 0.95 * wind_front + 0.3 * unit.sample(rng);
        for b in 0..n {
            demand_ar[b] = 0.9 * demand_ar[b] + 0.01 * base[b] * unit.sample(rng);
            cloud_local[b] = 0.8 * cloud_local[b] + 0.1 * unit.sample(rng);
            wind_local[b] = 0.9 * wind_local[b] + 0.1 * unit.sample(rng);
            let daily = 1.0 + 0.3 * (tau * (hour - 9.0 - phase[b]) / 24.0).sin();
            let week = if weekend { 1.0 - weekly[b] } else { 1.0 };
            demand[(t, b)] = base[b] * daily * week + demand_ar[b];
            let clear = sigmoid(2.0 + cloud + cloud_local[b]);
            solar[(t, b)] = solar_cap[b] * bell * season * clear;
            wind[(t, b)] = wind_cap[b] * sigmoid(wind_front + wind_local[b]);
        }
    }
    Profiles {
        demand,
        solar,
        wind,
    }
}

fn sensitivity(topology: &ConnectivityGraph, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let n = topology.n;
    let shifted = laplacian(topology) + DMatrix::identity(n, n);
    let inv = shifted
        .cholesky()
        .ok_or_else(|| Error::singular("L + I"))?
        .inverse();
    let d = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    Ok(DMatrix::from_fn(n, n, |i, j| {
        VOLTAGE_GAIN * d[i] * inv[(i, j)] * d[j]
    }))
}

/// Fills `truth` for p, q and voltage from the per-bus demand, solar and
/// wind columns already present in it.
fn recompute_physics(
    series: &[SeriesKey],
    truth: &mut DMatrix<f64>,
    m: &DMatrix<f64>,
    solar_scale: &[f64],
    from_hour: usize,
) -> Result<()> {
    let n = m.nrows();
    let col = |bus, kind| {
        series
            .binary_search(&SeriesKey { bus, kind })
            .map_err(|_| Error::Domain(format!("bus {bus} has no {kind} series")))
    };
    let ratio = reactive_ratio();
    for t in from_hour..truth.nrows() {
        let mut p = DVector::zeros(n);
        for b in 0..n {
            let s = truth[(t, col(b, Kind::Solar)?)] * solar_scale[b];
            let w = truth[(t, col(b, Kind::Wind)?)];
            let d = truth[(t, col(b, Kind::Demand)?)];
            p[b] = s + w - d;
        }
        let v = m * &p;
        for b in 0..n {
            truth[(t, col(b, Kind::P)?)] = p[b];
            truth[(t, col(b, Kind::Q)?)] = p[b] * ratio;
            truth[(t, col(b, Kind::Voltage)?)] = 1.0 + v[b];
        }
    }
    Ok(())
}

/// Synthetic dataset with every quantity kind at every bus.
pub fn generate(n_buses: usize, n_hours: usize, seed: u64) -> Result<GridDataset> {
    if n_buses < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 buses, got {n_buses}"
        )));
    }
    if n_hours < 24 {
        return Err(Error::Domain(format!(
            "need at least 24 hours, got {n_hours}"
        )));
    }
    let mut rng = seeds::stream(seed, seeds::DATA);
    let topology = random_topology(n_buses, &mut rng)?;
    let prof = profiles(n_buses, n_hours, &mut rng);
    let m = sensitivity(&topology, &mut rng)?;

    let series: Vec<SeriesKey> = (0..n_buses)
        .flat_map(|bus| {
            Kind::ALL
                .into_iter()
                .map(move |kind| SeriesKey { bus, kind })
        })
        .collect();
    let mut truth = DMatrix::zeros(n_hours, series.len());
    for (s, key) in series.iter().enumerate() {
        let src = match key.kind {
            Kind::Demand => &prof.demand,
            Kind::Solar => &prof.solar,
            Kind::Wind => &prof.wind,
            _ => continue,
        };
        truth.set_column(s, &src.column(key.bus));
    }
    recompute_physics(&series, &mut truth, &m, &vec![1.0; n_buses], 0)?;

    let noise: BTreeMap<Kind, f64> = Kind::ALL
        .into_iter()
        .map(|k| (k, k.default_sigma()))
        .collect();
    let mut noise_rng = seeds::stream(seed, seeds::NOISE);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut measured = truth.clone();
    for s in 0..series.len() {
        let sigma = noise[&series[s].kind];
        for t in 0..n_hours {
            measured[(t, s)] += sigma * unit.sample(&mut noise_rng);
        }
    }
    Ok(GridDataset {
        topology,
        observed: DMatrix::from_element(n_hours, series.len(), true),
        series,
        measured,
        truth: Some(truth),
        noise,
        sensitivity: Some(m),
    })
}

/// Scales the physical generation of `kind` at `bus` by `factor` from
/// `from_hour` on, propagating to p, q and voltage (ground truth and
/// measurements alike) while the generation sensor itself keeps reporting
/// the unscaled value.
pub fn inject_anomaly(
    dataset: &GridDataset,
    bus: usize,
    kind: Kind,
    factor: f64,
    from_hour: usize,
) -> Result<GridDataset> {
    if kind != Kind::Solar {
        return Err(Error::Domain(format!(
            "anomaly injection supports solar generation, got {kind}"
        )));
    }
    dataset
        .index(bus, kind)
        .ok_or_else(|| Error::Domain(format!("bus {bus} has no solar series")))?;
    let m = dataset.sensitivity.as_ref().ok_or_else(|| {
        Error::Domain("dataset has no voltage sensitivity; anomalies need synthetic data".into())
    })?;
    let truth = dataset
        .truth
        .as_ref()
        .ok_or_else(|| Error::Domain("dataset has no ground truth".into()))?;
    if from_hour >= dataset.hours() {
        return Err(Error::Domain(format!(
            "from_hour {from_hour} beyond {} hours",
            dataset.hours()
        )));
    }
    if factor == 1.0 {
        return Ok(dataset.clone());
    }
    let mut scale = vec![1.0; dataset.buses()];
    scale[bus] = factor;
    let mut new_truth = truth.clone();
    recompute_physics(&dataset.series, &mut new_truth, m, &scale, from_hour)?;
    let mut out = dataset.clone();
    out.measured += &new_truth - truth;
    out.truth = Some(new_truth);
    Ok(out)
}

/// Fresh uniform mask: each entry is hidden with probability `ratio`.
pub fn mask_missing(dataset: &GridDataset, ratio: f64, seed: u64) -> Result<GridDataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Domain(format!(
            "missing ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let mut rng = seeds::stream(seed, seeds::MASK);
    let mut out = dataset.clone();
    for t in 0..out.hours() {
        for s in 0..out.series.len() {
            out.observed[(t, s)] = rng.random::<f64>() >= ratio;
        }
    }
    Ok(out)
}

/// Fresh sensor noise around the ground truth, drawn from the noise
/// stream of `seed`.
pub fn resample_noise(dataset: &GridDataset, seed: u64) -> Result<GridDataset> {
    let truth = dataset
        .truth
        .as_ref()
        .ok_or_else(|| Error::Domain("resampling noise needs ground truth".into()))?;
    let mut rng = seeds::stream(seed, seeds::NOISE);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = dataset.clone();
    for s in 0..out.series.len() {
        let sigma = dataset.sigma(out.series[s].kind);
        for t in 0..out.hours() {
            out.measured[(t, s)] = truth[(t, s)] + sigma * unit.sample(&mut rng);
        }
    }
    Ok(out)
}

pub const DATASET_FILE: &str = "dataset.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const TOPOLOGY_FILE: &str = "topology.csv";
pub const NOISE_FILE: &str = "noise.csv";
pub const SENSITIVITY_FILE: &str = "sensitivity.csv";

/// Writes the dataset files into directory `dir`.
pub fn save_csv(dataset: &GridDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(DATASET_FILE);
    let mut w = csvio::writer(&path)?;
    csvio::write_row(&mut w, &path, ["hour", "bus", "kind", "value", "observed"])?;
    for t in 0..dataset.hours() {
        for (s, key) in dataset.series.iter().enumerate() {
            csvio::write_row(
                &mut w,
                &path,
                [
                    t.to_string(),
                    key.bus.to_string(),
                    key.kind.to_string(),
                    fmt_f64(dataset.measured[(t, s)]),
                    (dataset.observed[(t, s)] as u8).to_string(),
                ],
            )?;
        }
    }
    csvio::finish(w)?;

    if let Some(truth) = &dataset.truth {
        let path = dir.join(TRUTH_FILE);
        let mut w = csvio::writer(&path)?;
        csvio::write_row(&mut w, &path, ["hour", "bus", "kind", "value"])?;
        for t in 0..dataset.hours() {
            for (s, key) in dataset.series.iter().enumerate() {
                csvio::write_row(
                    &mut w,
                    &path,
                    [
                        t.to_string(),
                        key.bus.to_string(),
                        key.kind.to_string(),
                        fmt_f64(truth[(t, s)]),
                    ],
                )?;
            }
        }
        csvio::finish(w)?;
    }

    dataset.topology.save_csv(&dir.join(TOPOLOGY_FILE))?;

    let path = dir.join(NOISE_FILE);
    let mut w = csvio::writer(&path)?;
    csvio::write_row(&mut w, &path, ["kind", "sigma"])?;
    for (k, s) in &dataset.noise {
        csvio::write_row(&mut w, &path, [k.to_string(), fmt_f64(*s)])?;
    }
    csvio::finish(w)?;

    if let Some(m) = &dataset.sensitivity {
        let path = dir.join(SENSITIVITY_FILE);
        let mut w = csvio::writer(&path)?;
        csvio::write_row(&mut w, &path, ["row", "col", "value"])?;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                csvio::write_row(
                    &mut w,
                    &path,
                    [i.to_string(), j.to_string(), fmt_f64(m[(i, j)])],
                )?;
            }
        }
        csvio::finish(w)?;
    }
    Ok(())
}

type LongRows = BTreeMap<(usize, SeriesKey), (usize, f64, bool)>;

fn read_long(path: &Path, with_observed: bool) -> Result<LongRows> {
    let mut table = Table::open(path)?;
    let hour = table.column("hour")?;
    let bus = table.column("bus")?;
    let kind = table.column("kind")?;
    let value = table.column("value")?;
    let observed = if with_observed {
        Some(table.column("observed")?)
    } else {
        None
    };
    let name = table.path.clone();
    let mut out = BTreeMap::new();
    for row in table.rows() {
        let (line, rec) = row?;
        let t: usize = field(&name, line, &rec, hour, "hour")?;
        let b: usize = field(&name, line, &rec, bus, "bus")?;
        let k: Kind = rec[kind].parse().map_err(|_| Error::Parse {
            path: name.clone(),
            line,
            message: format!("unknown quantity kind `{}`", &rec[kind]),
        })?;
        let raw = &rec[value];
        let (v, present) = if raw == "NA" || raw.is_empty() {
            (f64::NAN, false)
        } else {
            (field::<f64>(&name, line, &rec, value, "value")?, true)
        };
        let obs = match observed {
            Some(c) => match &rec[c] {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse {
                        path: name.clone(),
                        line,
                        message: format!("observed must be 0 or 1, got `{other}`"),
                    })
                }
            },
            None => true,
        };
        let key = SeriesKey { bus: b, kind: k };
        if out.insert((t, key), (line, v, obs && present)).is_some() {
            return Err(Error::Parse {
                path: name.clone(),
                line,
                message: format!("duplicate entry for hour {t}, {key}"),
            });
        }
    }
    Ok(out)
}

fn to_matrices(
    rows: &LongRows,
    series: &[SeriesKey],
    hours: usize,
    path: &Path,
) -> Result<(DMatrix<f64>, DMatrix<bool>)> {
    let mut values = DMatrix::from_element(hours, series.len(), f64::NAN);
    let mut observed = DMatrix::from_element(hours, series.len(), false);
    let mut seen = DMatrix::from_element(hours, series.len(), false);
    for (&(t, key), &(_, v, obs)) in rows {
        let Ok(s) = series.binary_search(&key) else {
            return Err(Error::Domain(format!(
                "{}: series {key} not present in the dataset",
                path.display()
            )));
        };
        if t >= hours {
            return Err(Error::Domain(format!(
                "{}: hour {t} beyond the dataset's {hours} hours",
                path.display()
            )));
        }
        values[(t, s)] = v;
        observed[(t, s)] = obs;
        seen[(t, s)] = true;
    }
    if let Some(idx) = seen.iter().position(|&x| !x) {
        let (t, s) = (idx % hours, idx / hours);
        return Err(Error::Domain(format!(
            "{}: ragged series, {} has no entry for hour {t}",
            path.display(),
            series[s]
        )));
    }
    Ok((values, observed))
}

/// Reads a dataset directory written by [`save_csv`] or prepared
/// externally. `truth.csv` and `sensitivity.csv` are optional; without
/// `noise.csv` the default sensor sigmas apply.
pub fn load_csv(dir: &Path) -> Result<GridDataset> {
    let data_path = dir.join(DATASET_FILE);
    let rows = read_long(&data_path, true)?;
    let mut series: Vec<SeriesKey> = rows.keys().map(|(_, k)| *k).collect();
    series.sort_unstable();
    series.dedup();
    let hours = rows.keys().map(|(t, _)| t + 1).max().unwrap_or(0);
    let (measured, observed) = to_matrices(&rows, &series, hours, &data_path)?;

    let max_bus = series.iter().map(|k| k.bus + 1).max().unwrap_or(0);
    let topology = ConnectivityGraph::load_csv(&dir.join(TOPOLOGY_FILE), None)?;
    let topology = ConnectivityGraph::new(topology.n.max(max_bus), topology.edges)?;

    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        let rows = read_long(&truth_path, false)?;
        Some(to_matrices(&rows, &series, hours, &truth_path)?.0)
    } else {
        None
    };

    let noise_path = dir.join(NOISE_FILE);
    let mut noise = BTreeMap::new();
    if noise_path.exists() {
        let mut table = Table::open(&noise_path)?;
        let kc = table.column("kind")?;
        let sc = table.column("sigma")?;
        let name = table.path.clone();
        for row in table.rows() {
            let (line, rec) = row?;
            let k: Kind = rec[kc].parse().map_err(|_| Error::Parse {
                path: name.clone(),
                line,
                message: format!("unknown quantity kind `{}`", &rec[kc]),
            })?;
            noise.insert(k, field::<f64>(&name, line, &rec, sc, "sigma")?);
        }
    } else {
        noise = Kind::ALL
            .into_iter()
            .map(|k| (k, k.default_sigma()))
            .collect();
    }

    let sens_path = dir.join(SENSITIVITY_FILE);
    let sensitivity = if sens_path.exists() {
        let n = topology.n;
        let mut m = DMatrix::zeros(n, n);
        let mut table = Table::open(&sens_path)?;
        let (rc, cc, vc) = (
            table.column("row")?,
            table.column("col")?,
            table.column("value")?,
        );
        let name = table.path.clone();
        for row in table.rows() {
            let (line, rec) = row?;
            let i: usize = field(&name, line, &rec, rc, "row")?;
            let j: usize = field(&name, line, &rec, cc, "col")?;
            if i >= n || j >= n {
                return Err(Error::Parse {
                    path: name.clone(),
                    line,
                    message: format!("index ({i}, {j}) outside {n}x{n}"),
                });
            }
            m[(i, j)] = field(&name, line, &rec, vc, "value")?;
        }
        Some(m)
    } else {
        None
    };

    let ds = GridDataset {
        topology,
        series,
        measured,
        observed,
        truth,
        noise,
        sensitivity,
    };
    ds.validate()?;
    Ok(ds)
}
