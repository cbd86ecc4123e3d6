//! Problem instances: uniform generation, TSPLIB/CVRPLIB ingestion, JSONL
//! datasets and the four optimum-preserving coordinate augmentations.
//!
//! Node layout for CVRP: indices `0..n_depot_copies` are depot copies (all at
//! the depot coordinate, demand 0), followed by the customers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Tsp,
    Cvrp,
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProblemKind::Tsp => f.write_str("tsp"),
            ProblemKind::Cvrp => f.write_str("cvrp"),
        }
    }
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsp" => Ok(ProblemKind::Tsp),
            "cvrp" => Ok(ProblemKind::Cvrp),
            other => Err(Error::InvalidArgument(format!("unknown problem kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub kind: ProblemKind,
    /// One coordinate per tour node, depot copies included.
    pub coords: Vec<[f64; 2]>,
    /// Empty for TSP, one entry per tour node for CVRP.
    pub demands: Vec<u32>,
    /// Vehicle capacity; 0 for TSP.
    pub capacity: u32,
    /// Number of depot copies; 0 for TSP.
    pub n_depot_copies: usize,
}

impl Instance {
    pub fn tsp(id: impl Into<String>, coords: Vec<[f64; 2]>) -> Self {
        Instance { id: id.into(), kind: ProblemKind::Tsp, coords, demands: Vec::new(), capacity: 0, n_depot_copies: 0 }
    }

    /// Builds a CVRP instance from a depot, customer coordinates and customer
    /// demands, replicating the depot `n_depot_copies` times.
    pub fn cvrp(
        id: impl Into<String>,
        depot: [f64; 2],
        customers: &[[f64; 2]],
        customer_demands: &[u32],
        capacity: u32,
        n_depot_copies: usize,
    ) -> Result<Self> {
        if customers.len() != customer_demands.len() {
            return Err(Error::MalformedInput(format!(
                "{} customers but {} demands",
                customers.len(),
                customer_demands.len()
            )));
        }
        if capacity == 0 {
            return Err(Error::InvalidArgument("capacity must be positive".into()));
        }
        if n_depot_copies == 0 {
            return Err(Error::InvalidArgument("at least one depot copy is required".into()));
        }
        if let Some(d) = customer_demands.iter().find(|&&d| d > capacity) {
            return Err(Error::InvalidArgument(format!("demand {d} exceeds capacity {capacity}")));
        }
        let mut coords = vec![depot; n_depot_copies];
        coords.extend_from_slice(customers);
        let mut demands = vec![0; n_depot_copies];
        demands.extend_from_slice(customer_demands);
        Ok(Instance { id: id.into(), kind: ProblemKind::Cvrp, coords, demands, capacity, n_depot_copies })
    }

    /// Total number of nodes in a tour (customers plus depot copies).
    pub fn n_nodes(&self) -> usize {
        self.coords.len()
    }

    pub fn n_customers(&self) -> usize {
        self.coords.len() - self.n_depot_copies
    }

    pub fn is_depot(&self, node: usize) -> bool {
        node < self.n_depot_copies
    }

    pub fn dist(&self, a: usize, b: usize) -> f64 {
        let [ax, ay] = self.coords[a];
        let [bx, by] = self.coords[b];
        (ax - bx).hypot(ay - by)
    }

    pub fn demand(&self, node: usize) -> u32 {
        self.demands.get(node).copied().unwrap_or(0)
    }

    pub fn mean_customer_demand(&self) -> f64 {
        let n = self.n_customers();
        if n == 0 || self.demands.is_empty() {
            return 0.0;
        }
        self.demands[self.n_depot_copies..].iter().map(|&d| d as f64).sum::<f64>() / n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.iter().any(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::MalformedInput(format!("instance {}: non-finite coordinate", self.id)));
        }
        match self.kind {
            ProblemKind::Tsp => {
                if self.coords.len() < 3 {
                    return Err(Error::MalformedInput(format!("instance {}: fewer than 3 nodes", self.id)));
                }
            }
            ProblemKind::Cvrp => {
                if self.n_depot_copies == 0 || self.capacity == 0 {
                    return Err(Error::MalformedInput(format!("instance {}: missing depot or capacity", self.id)));
                }
                if self.demands.len() != self.coords.len() {
                    return Err(Error::MalformedInput(format!("instance {}: demand count mismatch", self.id)));
                }
                let depot = self.coords[0];
                for i in 0..self.n_depot_copies {
                    if self.coords[i] != depot || self.demands[i] != 0 {
                        return Err(Error::MalformedInput(format!("instance {}: inconsistent depot copy {i}", self.id)));
                    }
                }
                if self.demands.iter().any(|&d| d > self.capacity) {
                    return Err(Error::MalformedInput(format!("instance {}: demand exceeds capacity", self.id)));
                }
            }
        }
        Ok(())
    }
}

/// Capacity and depot-copy counts as a function of the customer count.
/// `None` fields fall back to the defaults below.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CapacityRule {
    pub capacity: Option<u32>,
    pub depot_copies: Option<usize>,
}

impl CapacityRule {
    pub fn fixed(capacity: u32, depot_copies: usize) -> Self {
        CapacityRule { capacity: Some(capacity), depot_copies: Some(depot_copies) }
    }

    /// 30/40/50 at 20/50/100 customers, piecewise-linear in between and
    /// clamped outside that range.
    pub fn capacity_for(&self, n: usize) -> u32 {
        if let Some(c) = self.capacity {
            return c;
        }
        const TABLE: [(f64, f64); 3] = [(20.0, 30.0), (50.0, 40.0), (100.0, 50.0)];
        let x = n as f64;
        if x <= TABLE[0].0 {
            return TABLE[0].1 as u32;
        }
        for w in TABLE.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if x <= x1 {
                return (y0 + (y1 - y0) * (x - x0) / (x1 - x0)).round() as u32;
            }
        }
        TABLE[2].1 as u32
    }

    /// 10/20/20 at 20/50/100 customers, `max(1, ceil(n/2))` otherwise.
    pub fn depot_copies_for(&self, n: usize) -> usize {
        if let Some(d) = self.depot_copies {
            return d;
        }
        match n {
            20 => 10,
            50 | 100 => 20,
            _ => default_depot_copies(n),
        }
    }
}

pub fn default_depot_copies(n_customers: usize) -> usize {
    n_customers.div_ceil(2).max(1)
}

/// Samples an instance with coordinates uniform on the unit square and, for
/// CVRP, demands uniform on `{1..9}`.
pub fn generate_uniform(kind: ProblemKind, n_customers: usize, seed: u64, rule: CapacityRule) -> Result<Instance> {
    let mut rng = rng::seeded(seed);
    generate_with(kind, n_customers, &mut rng, rule, format!("{kind}{n_customers}-{seed}"))
}

pub fn generate_with(
    kind: ProblemKind,
    n_customers: usize,
    rng: &mut Rng,
    rule: CapacityRule,
    id: String,
) -> Result<Instance> {
    if n_customers < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 customers, got {n_customers}")));
    }
    let point = |rng: &mut Rng| [rng.gen::<f64>(), rng.gen::<f64>()];
    match kind {
        ProblemKind::Tsp => {
            let coords = (0..n_customers).map(|_| point(rng)).collect();
            Ok(Instance::tsp(id, coords))
        }
        ProblemKind::Cvrp => {
            let depot = point(rng);
            let customers: Vec<_> = (0..n_customers).map(|_| point(rng)).collect();
            let demands: Vec<u32> = (0..n_customers).map(|_| rng.gen_range(1..=9)).collect();
            let capacity = rule.capacity_for(n_customers);
            if capacity < 9 {
                return Err(Error::InvalidArgument(format!("capacity {capacity} below the maximum demand 9")));
            }
            Instance::cvrp(id, depot, &customers, &demands, capacity, rule.depot_copies_for(n_customers))
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    FlipXY,
    OneMinusX,
    OneMinusY,
    Rotate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    /// Exact `(cos, sin)` so quarter turns introduce no rounding.
    fn cos_sin(self) -> (f64, f64) {
        match self {
            Rotation::R0 => (1.0, 0.0),
            Rotation::R90 => (0.0, 1.0),
            Rotation::R180 => (-1.0, 0.0),
            Rotation::R270 => (0.0, -1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub order: [Transform; 4],
    pub flip_xy: bool,
    pub one_minus_x: bool,
    pub one_minus_y: bool,
    pub rotate: Rotation,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            order: [Transform::FlipXY, Transform::OneMinusX, Transform::OneMinusY, Transform::Rotate],
            flip_xy: false,
            one_minus_x: false,
            one_minus_y: false,
            rotate: Rotation::R0,
        }
    }

    pub fn random(rng: &mut Rng) -> Self {
        let mut order = [Transform::FlipXY, Transform::OneMinusX, Transform::OneMinusY, Transform::Rotate];
        order.shuffle(rng);
        let flip_xy = rng.gen::<bool>();
        let one_minus_x = rng.gen::<bool>();
        let one_minus_y = rng.gen::<bool>();
        let rotate = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270][rng.gen_range(0..4)];
        AugmentConfig { order, flip_xy, one_minus_x, one_minus_y, rotate }
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        let [mut x, mut y] = p;
        for t in self.order {
            match t {
                Transform::FlipXY if self.flip_xy => std::mem::swap(&mut x, &mut y),
                Transform::OneMinusX if self.one_minus_x => x = 1.0 - x,
                Transform::OneMinusY if self.one_minus_y => y = 1.0 - y,
                Transform::Rotate => {
                    let (c, s) = self.rotate.cos_sin();
                    (x, y) = (x * c - y * s, x * s + y * c);
                }
                _ => {}
            }
        }
        [x, y]
    }

    pub fn apply(&self, instance: &Instance) -> Instance {
        let mut out = instance.clone();
        for c in &mut out.coords {
            *c = self.apply_point(*c);
        }
        out
    }
}

/// Applies the four transformations in a random order with random settings.
pub fn augment(instance: &Instance, rng: &mut Rng) -> (Instance, AugmentConfig) {
    let config = AugmentConfig::random(rng);
    (config.apply(instance), config)
}

// ---------------------------------------------------------------------------
// TSPLIB / CVRPLIB
// ---------------------------------------------------------------------------

/// Parses the EUC_2D subset of TSPLIB (TSP) and CVRPLIB (CVRP) text.
pub fn parse_benchmark(text: &str) -> Result<Instance> {
    let mut name = String::from("benchmark");
    let mut kind = None;
    let mut dimension: Option<usize> = None;
    let mut capacity: Option<u32> = None;
    let mut coords: Vec<(usize, [f64; 2])> = Vec::new();
    let mut demands: Vec<(usize, u32)> = Vec::new();
    let mut depots: Vec<usize> = Vec::new();

    #[derive(PartialEq)]
    enum Section {
        Header,
        Coords,
        Demands,
        Depots,
        Other,
    }
    let mut section = Section::Header;

    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "EOF" {
            break;
        }
        if let Some((key, value)) = line.split_once(':') {
            let key = key.trim().to_ascii_uppercase();
            let value = value.trim();
            let parsed_header = match key.as_str() {
                "NAME" => {
                    name = value.to_string();
                    true
                }
                "TYPE" => {
                    kind = Some(match value.to_ascii_uppercase().as_str() {
                        "TSP" => ProblemKind::Tsp,
                        "CVRP" => ProblemKind::Cvrp,
                        other => return Err(Error::UnsupportedFormat(format!("TYPE {other}"))),
                    });
                    true
                }
                "DIMENSION" => {
                    dimension = Some(parse_num(value, "DIMENSION")?);
                    true
                }
                "CAPACITY" => {
                    capacity = Some(parse_num(value, "CAPACITY")?);
                    true
                }
                "EDGE_WEIGHT_TYPE" => {
                    if !value.eq_ignore_ascii_case("EUC_2D") {
                        return Err(Error::UnsupportedFormat(format!("EDGE_WEIGHT_TYPE {value}")));
                    }
                    true
                }
                "COMMENT" | "EDGE_WEIGHT_FORMAT" | "NODE_COORD_TYPE" | "DISPLAY_DATA_TYPE" => true,
                _ => false,
            };
            if parsed_header {
                section = Section::Header;
                continue;
            }
        }
        let upper = line.to_ascii_uppercase();
        if upper.ends_with("_SECTION") {
            section = match upper.as_str() {
                "NODE_COORD_SECTION" => Section::Coords,
                "DEMAND_SECTION" => Section::Demands,
                "DEPOT_SECTION" => Section::Depots,
                "EDGE_WEIGHT_SECTION" => {
                    return Err(Error::UnsupportedFormat("explicit edge weights".into()));
                }
                _ => Section::Other,
            };
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Coords => {
                if fields.len() < 3 {
                    return Err(Error::MalformedInput(format!("bad coordinate line '{line}'")));
                }
                let id: usize = parse_num(fields[0], "node id")?;
                let x: f64 = parse_num(fields[1], "x")?;
                let y: f64 = parse_num(fields[2], "y")?;
                coords.push((id, [x, y]));
            }
            Section::Demands => {
                if fields.len() < 2 {
                    return Err(Error::MalformedInput(format!("bad demand line '{line}'")));
                }
                demands.push((parse_num(fields[0], "node id")?, parse_num(fields[1], "demand")?));
            }
            Section::Depots => {
                for f in fields {
                    let v: i64 = parse_num(f, "depot id")?;
                    if v >= 1 {
                        depots.push(v as usize);
                    }
                }
            }
            Section::Other => {}
            Section::Header => {
                return Err(Error::MalformedInput(format!("unexpected line '{line}'")));
            }
        }
    }

    let dimension = dimension.ok_or_else(|| Error::MalformedInput("missing DIMENSION".into()))?;
    if coords.len() != dimension {
        return Err(Error::MalformedInput(format!("DIMENSION {dimension} but {} coordinates", coords.len())));
    }
    coords.sort_by_key(|&(id, _)| id);
    if coords.iter().enumerate().any(|(i, &(id, _))| id != i + 1) {
        return Err(Error::MalformedInput("node ids must be 1..=DIMENSION".into()));
    }
    let kind = kind.unwrap_or(if capacity.is_some() || !demands.is_empty() { ProblemKind::Cvrp } else { ProblemKind::Tsp });

    match kind {
        ProblemKind::Tsp => {
            let inst = Instance::tsp(name, coords.into_iter().map(|(_, c)| c).collect());
            inst.validate()?;
            Ok(inst)
        }
        ProblemKind::Cvrp => {
            let capacity = capacity.ok_or_else(|| Error::MalformedInput("missing CAPACITY".into()))?;
            if demands.len() != dimension {
                return Err(Error::MalformedInput(format!("DIMENSION {dimension} but {} demands", demands.len())));
            }
            demands.sort_by_key(|&(id, _)| id);
            let depot = depots.first().copied().unwrap_or(1);
            if depot == 0 || depot > dimension {
                return Err(Error::MalformedInput(format!("depot id {depot} out of range")));
            }
            let mut customers = Vec::with_capacity(dimension - 1);
            let mut customer_demands = Vec::with_capacity(dimension - 1);
            for (&(id, c), &(_, d)) in coords.iter().zip(&demands) {
                if id != depot {
                    customers.push(c);
                    customer_demands.push(d);
                }
            }
            let d = default_depot_copies(customers.len());
            Instance::cvrp(name, coords[depot - 1].1, &customers, &customer_demands, capacity, d)
        }
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::MalformedInput(format!("cannot parse {what} from '{s}'")))
}

// ---------------------------------------------------------------------------
// JSONL datasets
// ---------------------------------------------------------------------------

pub fn write_jsonl(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}
