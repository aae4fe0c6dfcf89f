/// Compressed adjacency lists: for each source node, the ascending list of
/// target nodes it connects to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Neighborhood {
    /// Builds from per-node target lists. Lists are sorted before storing.
    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut list in lists {
            list.sort_unstable();
            list.dedup();
            targets.extend(list);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    /// Every node connected to every node.
    pub fn complete(nodes: usize) -> Self {
        Self::from_lists((0..nodes).map(|_| (0..nodes).collect()).collect())
    }

    pub fn nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of stored edges.
    pub fn nnz(&self) -> usize {
        self.targets.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    /// Edge-slot range of `node` within a flat per-edge value buffer.
    pub fn span(&self, node: usize) -> std::ops::Range<usize> {
        self.offsets[node]..self.offsets[node + 1]
    }

    pub fn max_degree(&self) -> usize {
        (0..self.nodes())
            .map(|i| self.offsets[i + 1] - self.offsets[i])
            .max()
            .unwrap_or(0)
    }

    /// `y[j] = sum_i x[i] * values[edge(i, j)]`, accumulated in ascending `i`.
    pub fn propagate(&self, x: &[f64], values: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nodes()];
        for (i, &xi) in x.iter().enumerate() {
            let span = self.span(i);
            for (&j, &v) in self.targets[span.clone()].iter().zip(&values[span]) {
                y[j] += xi * v;
            }
        }
        y
    }
}
