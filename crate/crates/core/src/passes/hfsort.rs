//! Function ordering by call-graph clustering.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::PassError;
use crate::model::ProgramModel;
use crate::profile::CallGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FunctionAlgorithm {
    #[default]
    None,
    Hfsort,
}

impl FromStr for FunctionAlgorithm {
    type Err = PassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(FunctionAlgorithm::None),
            "hfsort" => Ok(FunctionAlgorithm::Hfsort),
            other => Err(PassError::BadOption {
                option: "reorder-functions".into(),
                value: other.into(),
            }),
        }
    }
}

impl fmt::Display for FunctionAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FunctionAlgorithm::None => "none",
            FunctionAlgorithm::Hfsort => "hfsort",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HfsortOptions {
    pub max_cluster_size: u64,
    /// A merge may not push the hotter cluster's density below this fraction
    /// of what it was.
    pub min_density_ratio: f64,
}

impl Default for HfsortOptions {
    fn default() -> Self {
        HfsortOptions {
            max_cluster_size: 2 << 20,
            min_density_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub functions: Vec<String>,
    pub size: u64,
    pub weight: u64,
}

impl Cluster {
    pub fn density(&self) -> f64 {
        self.weight as f64 / self.size.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FunctionOrder {
    /// Hot clusters, densest first.
    pub clusters: Vec<Cluster>,
    /// Zero-weight and non-simple functions, in original order.
    pub tail: Vec<String>,
}

impl FunctionOrder {
    pub fn identity(model: &ProgramModel) -> Self {
        FunctionOrder {
            clusters: Vec::new(),
            tail: model.functions.iter().map(|f| f.name.clone()).collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        self.clusters
            .iter()
            .flat_map(|c| c.functions.iter().cloned())
            .chain(self.tail.iter().cloned())
            .collect()
    }
}

/// Greedy clustering: heaviest arcs first, the callee's cluster appended to
/// the caller's when the size cap and density bound allow it.
pub fn reorder_functions(model: &ProgramModel, cg: &CallGraph, opts: &HfsortOptions) -> FunctionOrder {
    let weight = |name: &str| cg.nodes.get(name).map_or(0, |n| n.weight);
    let mut tail = Vec::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut cluster_of: HashMap<&str, usize> = HashMap::new();
    let mut first_index: Vec<usize> = Vec::new();
    for (i, f) in model.functions.iter().enumerate() {
        if f.simple && weight(&f.name) > 0 {
            cluster_of.insert(&f.name, clusters.len());
            first_index.push(i);
            clusters.push(Cluster {
                functions: vec![f.name.clone()],
                size: f.size(),
                weight: weight(&f.name),
            });
        } else {
            tail.push(f.name.clone());
        }
    }

    let order = model.name_index();
    let mut arcs: Vec<(&str, &str, u64)> = cg
        .edges
        .iter()
        .filter(|((a, b), &w)| w > 0 && a != b && cluster_of.contains_key(a.as_str()) && cluster_of.contains_key(b.as_str()))
        .map(|((a, b), &w)| (a.as_str(), b.as_str(), w))
        .collect();
    arcs.sort_by(|x, y| y.2.cmp(&x.2).then((order[x.0], order[x.1]).cmp(&(order[y.0], order[y.1]))));

    for (caller, callee, _) in arcs {
        let (cu, cv) = (cluster_of[caller], cluster_of[callee]);
        if cu == cv {
            continue;
        }
        let (a, b) = (&clusters[cu], &clusters[cv]);
        let size = a.size + b.size;
        if size > opts.max_cluster_size {
            continue;
        }
        let merged = (a.weight + b.weight) as f64 / size.max(1) as f64;
        if merged < opts.min_density_ratio * a.density().max(b.density()) {
            continue;
        }
        let moved = std::mem::take(&mut clusters[cv].functions);
        for f in &moved {
            cluster_of.insert(model.functions[order[f.as_str()]].name.as_str(), cu);
        }
        let (w, s) = (clusters[cv].weight, clusters[cv].size);
        let c = &mut clusters[cu];
        c.functions.extend(moved);
        c.weight += w;
        c.size += s;
        first_index[cu] = first_index[cu].min(first_index[cv]);
    }

    let mut live: Vec<(Cluster, usize)> = clusters
        .into_iter()
        .zip(first_index)
        .filter(|(c, _)| !c.functions.is_empty())
        .collect();
    live.sort_by(|(a, ia), (b, ib)| b.density().total_cmp(&a.density()).then(ia.cmp(ib)));
    FunctionOrder {
        clusters: live.into_iter().map(|(c, _)| c).collect(),
        tail,
    }
}
