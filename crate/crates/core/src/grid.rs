//! Interconnected linearized power-system model.
//!
//! Generators carry governor/turbine dynamics, loads are structure-preserving
//! (own inertia at the substation), and the network couples bus powers to
//! frequencies through the susceptance Laplacian `Y_bus`. All quantities are
//! per-unit deviations from the operating point.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::lti::LtiSystem;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid grid: {0}")]
    Validation(String),
    #[error("network is disconnected")]
    DisconnectedNetwork,
    #[error("unknown bus {0}")]
    UnknownBus(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GridError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Generator,
    Load,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    /// Branch susceptance, p.u.
    pub b: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GenParams {
    /// Inertia, s^2
    pub j: f64,
    /// Damping, p.u.
    pub d: f64,
    /// Turbine time constant, s
    pub t_u: f64,
    /// Governor time constant, s
    pub t_g: f64,
    /// Turbine gain
    pub k_t: f64,
    /// Droop
    pub r: f64,
    /// Turbine coupling coefficient
    pub e_t: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LoadParams {
    pub j: f64,
    pub d: f64,
    /// Nominal consumed power, p.u.
    pub l_nominal: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSpec {
    pub base_mva: f64,
    pub nominal_hz: f64,
    /// Bus kinds keyed by bus id.
    pub buses: BTreeMap<usize, BusKind>,
    pub branches: Vec<Branch>,
    pub generators: BTreeMap<usize, GenParams>,
    pub loads: BTreeMap<usize, LoadParams>,
}

impl GridSpec {
    /// The shipped IEEE RTS 24-bus instance (10 generators, 14 loads,
    /// 38 branches; typical p.u. machine parameters, see the data file).
    pub fn rts24() -> GridSpec {
        parse_grid_str(RTS24_GRID).expect("embedded rts24 grid is valid")
    }

    pub fn n_gen(&self) -> usize {
        self.generators.len()
    }

    pub fn n_load(&self) -> usize {
        self.loads.len()
    }

    /// Generator bus ids, ascending.
    pub fn gen_buses(&self) -> Vec<usize> {
        self.generators.keys().cloned().collect()
    }

    /// Load bus ids, ascending.
    pub fn load_buses(&self) -> Vec<usize> {
        self.loads.keys().cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.buses.is_empty() {
            return Err(GridError::Validation("no buses".into()));
        }
        if self.base_mva <= 0.0 || self.nominal_hz <= 0.0 {
            return Err(GridError::Validation(
                "base_mva and nominal_hz must be positive".into(),
            ));
        }
        for (&id, kind) in &self.buses {
            match kind {
                BusKind::Generator => {
                    if !self.generators.contains_key(&id) {
                        return Err(GridError::Validation(format!(
                            "generator bus {id} has no generator parameters"
                        )));
                    }
                }
                BusKind::Load => {
                    if !self.loads.contains_key(&id) {
                        return Err(GridError::Validation(format!(
                            "load bus {id} has no load parameters"
                        )));
                    }
                }
            }
        }
        for (&id, g) in &self.generators {
            if self.buses.get(&id) != Some(&BusKind::Generator) {
                return Err(GridError::Validation(format!(
                    "generator parameters for non-generator bus {id}"
                )));
            }
            if !(g.j > 0.0) {
                return Err(GridError::Validation(format!("bus {id}: J must be > 0")));
            }
            if !(g.t_u > 0.0) || !(g.t_g > 0.0) {
                return Err(GridError::Validation(format!(
                    "bus {id}: T_u and T_g must be > 0"
                )));
            }
            if g.d < 0.0 {
                return Err(GridError::Validation(format!("bus {id}: D must be >= 0")));
            }
            if !(g.r > 0.0) {
                return Err(GridError::Validation(format!("bus {id}: r must be > 0")));
            }
        }
        for (&id, l) in &self.loads {
            if self.buses.get(&id) != Some(&BusKind::Load) {
                return Err(GridError::Validation(format!(
                    "load parameters for non-load bus {id}"
                )));
            }
            if !(l.j > 0.0) {
                return Err(GridError::Validation(format!("bus {id}: J must be > 0")));
            }
            if l.d < 0.0 {
                return Err(GridError::Validation(format!("bus {id}: D must be >= 0")));
            }
        }
        for br in &self.branches {
            if !self.buses.contains_key(&br.from) {
                return Err(GridError::UnknownBus(br.from));
            }
            if !self.buses.contains_key(&br.to) {
                return Err(GridError::UnknownBus(br.to));
            }
            if !(br.b > 0.0) {
                return Err(GridError::Validation(format!(
                    "branch {}-{}: b must be > 0",
                    br.from, br.to
                )));
            }
            if br.from == br.to {
                return Err(GridError::Validation(format!(
                    "branch {}-{} is a self-loop",
                    br.from, br.to
                )));
            }
        }
        // connectivity (BFS over branch graph)
        let mut seen = BTreeSet::new();
        let start = *self.buses.keys().next().unwrap();
        let mut queue = vec![start];
        seen.insert(start);
        while let Some(b) = queue.pop() {
            for br in &self.branches {
                let other = if br.from == b {
                    br.to
                } else if br.to == b {
                    br.from
                } else {
                    continue;
                };
                if seen.insert(other) {
                    queue.push(other);
                }
            }
        }
        if seen.len() != self.buses.len() {
            return Err(GridError::DisconnectedNetwork);
        }
        Ok(())
    }

    /// Serialize to the grid file dialect; `parse(serialize(g))` round-trips.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "base_mva = {}", self.base_mva);
        let _ = writeln!(s, "nominal_hz = {}", self.nominal_hz);
        let _ = writeln!(s, "\n[buses]");
        for (id, kind) in &self.buses {
            let k = match kind {
                BusKind::Generator => "generator",
                BusKind::Load => "load",
            };
            let _ = writeln!(s, "{id} {k}");
        }
        let _ = writeln!(s, "\n[branches]");
        for br in &self.branches {
            let _ = writeln!(s, "{} {} {}", br.from, br.to, br.b);
        }
        let _ = writeln!(s, "\n[generators]");
        for (id, g) in &self.generators {
            let _ = writeln!(
                s,
                "{id} {} {} {} {} {} {} {}",
                g.j, g.d, g.t_u, g.t_g, g.k_t, g.r, g.e_t
            );
        }
        let _ = writeln!(s, "\n[loads]");
        for (id, l) in &self.loads {
            let _ = writeln!(s, "{id} {} {} {}", l.j, l.d, l.l_nominal);
        }
        s
    }
}

pub const RTS24_GRID: &str = include_str!("../data/rts24.grid");

/// State layout: `[omega_G; P_T; a; P_G; omega_L; P_L]`, generators and loads
/// each ordered by ascending bus id. Total `n = 4 n_G + 2 n_L`.
#[derive(Debug, Clone)]
pub struct StateIndex {
    pub gen_buses: Vec<usize>,
    pub load_buses: Vec<usize>,
}

impl StateIndex {
    pub fn new(grid: &GridSpec) -> Self {
        StateIndex {
            gen_buses: grid.gen_buses(),
            load_buses: grid.load_buses(),
        }
    }

    pub fn n_gen(&self) -> usize {
        self.gen_buses.len()
    }

    pub fn n_load(&self) -> usize {
        self.load_buses.len()
    }

    pub fn n(&self) -> usize {
        4 * self.n_gen() + 2 * self.n_load()
    }

    fn gen_pos(&self, bus: usize) -> Option<usize> {
        self.gen_buses.binary_search(&bus).ok()
    }

    fn load_pos(&self, bus: usize) -> Option<usize> {
        self.load_buses.binary_search(&bus).ok()
    }

    /// State position of the frequency deviation at `bus`.
    pub fn omega(&self, bus: usize) -> Result<usize> {
        if let Some(g) = self.gen_pos(bus) {
            Ok(g)
        } else if let Some(l) = self.load_pos(bus) {
            Ok(4 * self.n_gen() + l)
        } else {
            Err(GridError::UnknownBus(bus))
        }
    }

    /// State position of the net injected power at `bus`.
    pub fn power(&self, bus: usize) -> Result<usize> {
        if let Some(g) = self.gen_pos(bus) {
            Ok(3 * self.n_gen() + g)
        } else if let Some(l) = self.load_pos(bus) {
            Ok(4 * self.n_gen() + self.n_load() + l)
        } else {
            Err(GridError::UnknownBus(bus))
        }
    }

    /// Turbine mechanical power state of a generator bus.
    pub fn turbine(&self, bus: usize) -> Result<usize> {
        self.gen_pos(bus)
            .map(|g| self.n_gen() + g)
            .ok_or(GridError::UnknownBus(bus))
    }

    /// Valve position state of a generator bus.
    pub fn valve(&self, bus: usize) -> Result<usize> {
        self.gen_pos(bus)
            .map(|g| 2 * self.n_gen() + g)
            .ok_or(GridError::UnknownBus(bus))
    }

    pub fn is_load_bus(&self, bus: usize) -> bool {
        self.load_pos(bus).is_some()
    }

    pub fn state_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n());
        for &b in &self.gen_buses {
            names.push(format!("omega_b{b}"));
        }
        for &b in &self.gen_buses {
            names.push(format!("pturb_b{b}"));
        }
        for &b in &self.gen_buses {
            names.push(format!("valve_b{b}"));
        }
        for &b in &self.gen_buses {
            names.push(format!("p_b{b}"));
        }
        for &b in &self.load_buses {
            names.push(format!("omega_b{b}"));
        }
        for &b in &self.load_buses {
            names.push(format!("p_b{b}"));
        }
        names
    }
}

/// Susceptance Laplacian in `[gen buses asc; load buses asc]` order. The
/// diagonal is constructed as minus the off-diagonal row sum, so every row
/// sums to zero up to rounding.
pub fn build_ybus(grid: &GridSpec) -> Result<DMatrix<f64>> {
    grid.validate()?;
    let mut order: Vec<usize> = grid.gen_buses();
    order.extend(grid.load_buses());
    let pos: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let nb = order.len();
    let mut y = DMatrix::<f64>::zeros(nb, nb);
    for br in &grid.branches {
        let (i, j) = (pos[&br.from], pos[&br.to]);
        y[(i, j)] -= br.b;
        y[(j, i)] -= br.b;
    }
    for i in 0..nb {
        let mut diag = 0.0;
        for j in 0..nb {
            if j != i {
                diag -= y[(i, j)];
            }
        }
        y[(i, i)] = diag;
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorQuantity {
    Frequency,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SensorSpec {
    pub bus: usize,
    pub quantity: SensorQuantity,
}

impl SensorSpec {
    pub fn label(&self) -> String {
        match self.quantity {
            SensorQuantity::Frequency => format!("omega_b{}", self.bus),
            SensorQuantity::Power => format!("p_b{}", self.bus),
        }
    }
}

/// Default sensor fleet: frequency at every bus, then power at every bus,
/// each block ordered by ascending bus id.
pub fn default_sensors(grid: &GridSpec) -> Vec<SensorSpec> {
    let mut all: Vec<usize> = grid.buses.keys().cloned().collect();
    all.sort_unstable();
    let mut sensors = Vec::with_capacity(2 * all.len());
    for &b in &all {
        sensors.push(SensorSpec {
            bus: b,
            quantity: SensorQuantity::Frequency,
        });
    }
    for &b in &all {
        sensors.push(SensorSpec {
            bus: b,
            quantity: SensorQuantity::Power,
        });
    }
    sensors
}

/// 0/1 selection matrix picking the requested frequency/power state per
/// sensor.
pub fn build_measurement_matrix(
    grid: &GridSpec,
    index: &StateIndex,
    sensors: &[SensorSpec],
) -> Result<DMatrix<f64>> {
    if !sensors.iter().all(|s| grid.buses.contains_key(&s.bus)) {
        let bad = sensors
            .iter()
            .find(|s| !grid.buses.contains_key(&s.bus))
            .unwrap();
        return Err(GridError::UnknownBus(bad.bus));
    }
    let mut c = DMatrix::<f64>::zeros(sensors.len(), index.n());
    for (row, s) in sensors.iter().enumerate() {
        let col = match s.quantity {
            SensorQuantity::Frequency => index.omega(s.bus)?,
            SensorQuantity::Power => index.power(s.bus)?,
        };
        c[(row, col)] = 1.0;
    }
    Ok(c)
}

/// Assemble the interconnected state-space model.
///
/// Generator bus: `J w' = -D w + P_T - P + e_T a`, `T_u P_T' = -P_T + K_t a`,
/// `T_g a' = -r a - w`. Load bus: `J w' = -D w - P` with the load deviation
/// routed to the disturbance channel. Network: `P' = Y_bus w`, where `P` is
/// the net power exported from each bus.
pub fn assemble_state_space(grid: &GridSpec) -> Result<(LtiSystem, StateIndex)> {
    let y = build_ybus(grid)?;
    let index = StateIndex::new(grid);
    let (ng, nl) = (index.n_gen(), index.n_load());
    let n = index.n();
    let mut a = DMatrix::<f64>::zeros(n, n);

    for (gi, &bus) in index.gen_buses.iter().enumerate() {
        let g = &grid.generators[&bus];
        let (w, pt, av, p) = (gi, ng + gi, 2 * ng + gi, 3 * ng + gi);
        a[(w, w)] = -g.d / g.j;
        a[(w, pt)] = 1.0 / g.j;
        a[(w, p)] = -1.0 / g.j;
        a[(w, av)] = g.e_t / g.j;
        a[(pt, pt)] = -1.0 / g.t_u;
        a[(pt, av)] = g.k_t / g.t_u;
        a[(av, av)] = -g.r / g.t_g;
        a[(av, w)] = -1.0 / g.t_g;
    }
    for (li, &bus) in index.load_buses.iter().enumerate() {
        let l = &grid.loads[&bus];
        let (w, p) = (4 * ng + li, 4 * ng + nl + li);
        a[(w, w)] = -l.d / l.j;
        a[(w, p)] = -1.0 / l.j;
    }
    // network coupling: P rows driven by bus frequencies
    for row_bus in 0..ng + nl {
        let p_state = if row_bus < ng {
            3 * ng + row_bus
        } else {
            4 * ng + nl + (row_bus - ng)
        };
        for col_bus in 0..ng + nl {
            let w_state = if col_bus < ng {
                col_bus
            } else {
                4 * ng + (col_bus - ng)
            };
            a[(p_state, w_state)] = y[(row_bus, col_bus)];
        }
    }

    let c = build_measurement_matrix(grid, &index, &default_sensors(grid))?;
    let sys = LtiSystem::new(a, c).expect("assembled matrices are consistent");
    Ok((sys, index))
}

/// Disturbance vector for a load-power deviation `delta` at a load bus:
/// `-delta / J` on that bus's frequency row.
pub fn load_disturbance(
    grid: &GridSpec,
    index: &StateIndex,
    bus: usize,
    delta: f64,
) -> Result<DVector<f64>> {
    let l = grid
        .loads
        .get(&bus)
        .ok_or(GridError::UnknownBus(bus))?;
    let mut d = DVector::zeros(index.n());
    d[index.omega(bus)?] = -delta / l.j;
    Ok(d)
}

pub fn parse_grid_file(path: &Path) -> Result<GridSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_grid_str(&text)
}

#[derive(PartialEq, Clone, Copy)]
enum Section {
    Header,
    Buses,
    Branches,
    Generators,
    Loads,
}

pub fn parse_grid_str(text: &str) -> Result<GridSpec> {
    let mut spec = GridSpec {
        base_mva: 0.0,
        nominal_hz: 0.0,
        buses: BTreeMap::new(),
        branches: Vec::new(),
        generators: BTreeMap::new(),
        loads: BTreeMap::new(),
    };
    let mut section = Section::Header;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name {
                "buses" => Section::Buses,
                "branches" => Section::Branches,
                "generators" => Section::Generators,
                "loads" => Section::Loads,
                other => {
                    return Err(GridError::Parse {
                        line,
                        msg: format!("unknown section [{other}]"),
                    })
                }
            };
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        match section {
            Section::Header => {
                let (key, value) = parse_kv(content, line)?;
                match key {
                    "base_mva" => spec.base_mva = parse_num(value, line, "base_mva")?,
                    "nominal_hz" => spec.nominal_hz = parse_num(value, line, "nominal_hz")?,
                    other => {
                        return Err(GridError::Parse {
                            line,
                            msg: format!("unknown header key '{other}'"),
                        })
                    }
                }
            }
            Section::Buses => {
                if fields.len() != 2 {
                    return Err(GridError::Parse {
                        line,
                        msg: "expected: <id> <generator|load>".into(),
                    });
                }
                let id = parse_usize(fields[0], line, "bus id")?;
                let kind = match fields[1] {
                    "generator" => BusKind::Generator,
                    "load" => BusKind::Load,
                    other => {
                        return Err(GridError::Parse {
                            line,
                            msg: format!("unknown bus kind '{other}'"),
                        })
                    }
                };
                if spec.buses.insert(id, kind).is_some() {
                    return Err(GridError::Parse {
                        line,
                        msg: format!("duplicate bus id {id}"),
                    });
                }
            }
            Section::Branches => {
                if fields.len() != 3 {
                    return Err(GridError::Parse {
                        line,
                        msg: "expected: <from> <to> <b>".into(),
                    });
                }
                spec.branches.push(Branch {
                    from: parse_usize(fields[0], line, "from")?,
                    to: parse_usize(fields[1], line, "to")?,
                    b: parse_num(fields[2], line, "b")?,
                });
            }
            Section::Generators => {
                if fields.len() != 8 {
                    return Err(GridError::Parse {
                        line,
                        msg: "expected: <bus> <J> <D> <T_u> <T_g> <K_t> <r> <e_T>".into(),
                    });
                }
                let id = parse_usize(fields[0], line, "bus")?;
                let g = GenParams {
                    j: parse_num(fields[1], line, "J")?,
                    d: parse_num(fields[2], line, "D")?,
                    t_u: parse_num(fields[3], line, "T_u")?,
                    t_g: parse_num(fields[4], line, "T_g")?,
                    k_t: parse_num(fields[5], line, "K_t")?,
                    r: parse_num(fields[6], line, "r")?,
                    e_t: parse_num(fields[7], line, "e_T")?,
                };
                if spec.generators.insert(id, g).is_some() {
                    return Err(GridError::Parse {
                        line,
                        msg: format!("duplicate generator at bus {id}"),
                    });
                }
            }
            Section::Loads => {
                if fields.len() != 4 {
                    return Err(GridError::Parse {
                        line,
                        msg: "expected: <bus> <J> <D> <L>".into(),
                    });
                }
                let id = parse_usize(fields[0], line, "bus")?;
                let l = LoadParams {
                    j: parse_num(fields[1], line, "J")?,
                    d: parse_num(fields[2], line, "D")?,
                    l_nominal: parse_num(fields[3], line, "L")?,
                };
                if spec.loads.insert(id, l).is_some() {
                    return Err(GridError::Parse {
                        line,
                        msg: format!("duplicate load at bus {id}"),
                    });
                }
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn parse_kv<'a>(content: &'a str, line: usize) -> Result<(&'a str, &'a str)> {
    let mut it = content.splitn(2, '=');
    let key = it.next().unwrap_or("").trim();
    let value = it
        .next()
        .ok_or_else(|| GridError::Parse {
            line,
            msg: "expected 'key = value'".into(),
        })?
        .trim();
    Ok((key, value))
}

fn parse_num(s: &str, line: usize, field: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| GridError::Parse {
        line,
        msg: format!("field '{field}': cannot parse '{s}' as a number"),
    })
}

fn parse_usize(s: &str, line: usize, field: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| GridError::Parse {
        line,
        msg: format!("field '{field}': cannot parse '{s}' as an integer"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::{default_tol_zero, stable_subspace};

    const TWO_BUS: &str = "
base_mva = 100
nominal_hz = 60

[buses]
1 generator
2 load

[branches]
1 2 5.0

[generators]
1 10.0 1.0 0.4 0.2 1.0 0.05 1.0

[loads]
2 1.5 0.0 0.8
";

    #[test]
    fn ybus_two_bus() {
        let grid = parse_grid_str(TWO_BUS).unwrap();
        let y = build_ybus(&grid).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[5.0, -5.0, -5.0, 5.0]);
        assert_eq!(y, expect);
    }

    #[test]
    fn ybus_triangle() {
        let text = "
base_mva = 100
nominal_hz = 60
[buses]
1 generator
2 load
3 load
[branches]
1 2 1.0
2 3 1.0
1 3 1.0
[generators]
1 10.0 1.0 0.4 0.2 1.0 0.05 1.0
[loads]
2 1.0 0.0 0.5
3 1.0 0.0 0.5
";
        let grid = parse_grid_str(text).unwrap();
        let y = build_ybus(&grid).unwrap();
        let expect =
            DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        assert_eq!(y, expect);
    }

    #[test]
    fn ybus_rts24_laplacian() {
        let grid = GridSpec::rts24();
        let y = build_ybus(&grid).unwrap();
        assert_eq!(y.nrows(), 24);
        assert!((y.clone() - y.transpose()).norm() == 0.0);
        // incidence-matrix oracle: Y = B_inc diag(b) B_inc^T
        let mut order: Vec<usize> = grid.gen_buses();
        order.extend(grid.load_buses());
        let pos: BTreeMap<usize, usize> =
            order.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let nb = order.len();
        let ne = grid.branches.len();
        let mut binc = DMatrix::<f64>::zeros(nb, ne);
        let mut w = DMatrix::<f64>::zeros(ne, ne);
        for (e, br) in grid.branches.iter().enumerate() {
            binc[(pos[&br.from], e)] = 1.0;
            binc[(pos[&br.to], e)] = -1.0;
            w[(e, e)] = br.b;
        }
        let oracle = &binc * w * binc.transpose();
        assert!((&y - oracle).norm() <= 1e-10 * y.norm());
        for i in 0..nb {
            let row_sum: f64 = (0..nb).map(|j| y[(i, j)]).sum();
            assert!(row_sum.abs() <= 1e-12, "row {i} sums to {row_sum}");
        }
    }

    #[test]
    fn rts24_counts() {
        let grid = GridSpec::rts24();
        assert_eq!(grid.buses.len(), 24);
        assert_eq!(grid.n_gen(), 10);
        assert_eq!(grid.n_load(), 14);
        assert_eq!(grid.branches.len(), 38);
    }

    #[test]
    fn state_space_single_gen_single_load() {
        let grid = parse_grid_str(TWO_BUS).unwrap();
        let (sys, index) = assemble_state_space(&grid).unwrap();
        assert_eq!(index.n(), 6);
        // hand-derived A for J=10, D=1, T_u=0.4, T_g=0.2, K_t=1, r=0.05,
        // e_T=1, load J=1.5, D=0, b=5. States: [w1, PT1, a1, P1, w2, P2].
        let expect = DMatrix::from_row_slice(
            6,
            6,
            &[
                -0.1, 0.1, 0.1, -0.1, 0.0, 0.0, //
                0.0, -2.5, 2.5, 0.0, 0.0, 0.0, //
                -5.0, 0.0, -0.25, 0.0, 0.0, 0.0, //
                5.0, 0.0, 0.0, 0.0, -5.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, -1.0 / 1.5, //
                -5.0, 0.0, 0.0, 0.0, 5.0, 0.0,
            ],
        );
        assert!((sys.a() - expect).norm() < 1e-14);
    }

    #[test]
    fn rts24_dimension_is_68() {
        let grid = GridSpec::rts24();
        let (sys, index) = assemble_state_space(&grid).unwrap();
        assert_eq!(index.n(), 68);
        assert_eq!(sys.n(), 68);
        assert_eq!(sys.m(), 48);
    }

    #[test]
    fn assembled_a_has_semisimple_zero_mode() {
        let grid = GridSpec::rts24();
        let (sys, _) = assemble_state_space(&grid).unwrap();
        let tol = default_tol_zero(sys.a());
        let dec = stable_subspace(&sys, tol).unwrap();
        assert_eq!(dec.z, 1);
        assert!((dec.v_max.transpose() * sys.a()).norm() <= 1e-8 * sys.a().norm());
    }

    #[test]
    fn measurement_matrix_shapes() {
        let grid = GridSpec::rts24();
        let (_, index) = assemble_state_space(&grid).unwrap();
        let empty = build_measurement_matrix(&grid, &index, &[]).unwrap();
        assert_eq!(empty.nrows(), 0);
        assert_eq!(empty.ncols(), 68);

        let one = build_measurement_matrix(
            &grid,
            &index,
            &[SensorSpec {
                bus: 1,
                quantity: SensorQuantity::Frequency,
            }],
        )
        .unwrap();
        assert_eq!(one.row(0).iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(one[(0, index.omega(1).unwrap())], 1.0);

        let full = build_measurement_matrix(&grid, &index, &default_sensors(&grid)).unwrap();
        assert_eq!(full.nrows(), 48);
        let mut rows: Vec<Vec<u8>> = Vec::new();
        for r in 0..full.nrows() {
            let sum: f64 = full.row(r).iter().map(|x| x.abs()).sum();
            assert_eq!(sum, 1.0);
            let key: Vec<u8> = full.row(r).iter().map(|&x| x as u8).collect();
            rows.push(key);
        }
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 48, "rows must be distinct");
    }

    #[test]
    fn parse_round_trip() {
        let grid = GridSpec::rts24();
        let text = grid.serialize();
        let again = parse_grid_str(&text).unwrap();
        assert_eq!(again.serialize(), text);
    }

    #[test]
    fn parse_rejects_nonpositive_inertia() {
        let bad = TWO_BUS.replace("1 10.0 1.0", "1 -10.0 1.0");
        match parse_grid_str(&bad) {
            Err(GridError::Validation(msg)) => assert!(msg.contains("J must be > 0")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_disconnected() {
        let text = "
base_mva = 100
nominal_hz = 60
[buses]
1 generator
2 load
3 load
[branches]
1 2 1.0
[generators]
1 10.0 1.0 0.4 0.2 1.0 0.05 1.0
[loads]
2 1.0 0.0 0.5
3 1.0 0.0 0.5
";
        assert!(matches!(
            parse_grid_str(text),
            Err(GridError::DisconnectedNetwork)
        ));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let text = "base_mva = 100\nnominal_hz = 60\n[buses]\n1 generator\nbogus line here\n";
        match parse_grid_str(text) {
            Err(GridError::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
