//! Undirected binary networks, the two simulation designs, and the
//! decomposition into connected components over which the likelihood
//! factorizes.

use std::collections::VecDeque;

use rand::Rng;

use crate::data::Covariates;
use crate::error::{invalid, Result};

/// Symmetric, loop-free adjacency structure.
///
/// Neighbor lists are kept sorted, so membership tests are binary searches
/// and iteration order is deterministic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    neighbors: Vec<Vec<usize>>,
    components: Vec<Vec<usize>>,
    component_of: Vec<usize>,
}

impl Network {
    /// Builds a network from undirected edges, each listed once.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) out of range for n = {n}")));
            }
            if i == j {
                return Err(invalid(format!("self-loop on individual {i}")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid(format!("duplicate edge at individual {i}")));
            }
        }
        Ok(Self::from_sorted_neighbors(neighbors))
    }

    fn from_sorted_neighbors(neighbors: Vec<Vec<usize>>) -> Self {
        let (components, component_of) = traverse_components(&neighbors);
        Self {
            neighbors,
            components,
            component_of,
        }
    }

    /// Network with no edges.
    pub fn empty(n: usize) -> Self {
        Self::from_sorted_neighbors(vec![Vec::new(); n])
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn n_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_edges());
        for (i, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Maximal connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn component_of(&self, i: usize) -> usize {
        self.component_of[i]
    }

    /// True when every pair of members of component `c` is linked.
    pub fn is_complete_component(&self, c: usize) -> bool {
        let members = &self.components[c];
        members.iter().all(|&i| self.degree(i) == members.len() - 1)
    }

    /// Subnetwork induced by `members`, relabeled `0..members.len()` in the given order.
    pub fn induced(&self, members: &[usize]) -> Network {
        let mut local = vec![usize::MAX; self.len()];
        for (k, &i) in members.iter().enumerate() {
            local[i] = k;
        }
        let neighbors = members
            .iter()
            .map(|&i| {
                let mut list: Vec<usize> = self.neighbors[i]
                    .iter()
                    .filter_map(|&j| (local[j] != usize::MAX).then_some(local[j]))
                    .collect();
                list.sort_unstable();
                list
            })
            .collect();
        Network::from_sorted_neighbors(neighbors)
    }

    /// Relabels individuals: new label of `i` is `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Network> {
        if perm.len() != self.len() {
            return Err(invalid("permutation length differs from network size"));
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
        Network::from_edges(self.len(), &edges)
    }
}

fn traverse_components(neighbors: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let n = neighbors.len();
    let mut component_of = vec![usize::MAX; n];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if component_of[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start];
        component_of[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                if component_of[j] == usize::MAX {
                    component_of[j] = id;
                    members.push(j);
                    queue.push_back(j);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    (components, component_of)
}

/// Disjoint union of `n_total / block_size` complete graphs.
pub fn make_block_network(n_total: usize, block_size: usize) -> Result<Network> {
    if block_size == 0 || !n_total.is_multiple_of(block_size) {
        return Err(invalid(format!(
            "block size {block_size} does not divide population size {n_total}"
        )));
    }
    let neighbors = (0..n_total)
        .map(|i| {
            let start = i - i % block_size;
            (start..start + block_size).filter(|&j| j != i).collect()
        })
        .collect();
    Ok(Network::from_sorted_neighbors(neighbors))
}

/// Contiguous groups `[0, size), [size, 2 size), ...` covering `n_total`.
pub fn contiguous_groups(n_total: usize, group_size: usize) -> Result<Vec<Vec<usize>>> {
    if group_size == 0 || !n_total.is_multiple_of(group_size) {
        return Err(invalid(format!(
            "group size {group_size} does not divide population size {n_total}"
        )));
    }
    Ok((0..n_total / group_size)
        .map(|g| (g * group_size..(g + 1) * group_size).collect())
        .collect())
}

/// Homophilic link formation within groups.
///
/// Within a group, `i` and `j` are linked iff
/// `(|x1_i - x1_j| + |x2_i - x2_j|) / 2 < eta_ij`, with a fresh uniform
/// `eta_ij` per unordered pair. The first two covariate columns are used.
/// Pairs are visited group by group in `(i, j)` order, `i < j` by position.
pub fn make_homophilic_network<R: Rng + ?Sized>(
    x: &Covariates,
    groups: &[Vec<usize>],
    rng: &mut R,
) -> Result<Network> {
    if x.n_cols() < 2 {
        return Err(invalid("homophilic design needs two covariate columns"));
    }
    let n = x.n_rows();
    let mut seen = vec![false; n];
    let mut edges = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(invalid(format!("group {g} is empty")));
        }
        for &i in members {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(invalid(format!("individual {i} out of range or in two groups")));
            }
        }
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                let dist = ((x.get(i, 0) - x.get(j, 0)).abs() + (x.get(i, 1) - x.get(j, 1)).abs()) / 2.0;
                let eta: f64 = rng.random();
                if dist < eta {
                    edges.push((i, j));
                }
            }
        }
    }
    Network::from_edges(n, &edges)
}
