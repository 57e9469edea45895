//! Rooted label trees: graph distances between labels and the category
//! partition at the second-to-last level, both consumed by the
//! hierarchy-induced set losses.

use std::collections::HashMap;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("hierarchy has no nodes")]
    Empty,
    #[error("hierarchy has no root (no node is its own parent)")]
    NoRoot,
    #[error("hierarchy has multiple roots: {0:?} and {1:?}")]
    MultipleRoots(String, String),
    #[error("node {0:?} is not reachable from the root (cycle or orphan)")]
    CycleDetected(String),
    #[error("label {label} maps to {node:?}, which is not a leaf")]
    LabelNotLeaf { label: usize, node: String },
    #[error("leaf {0:?} hosts more than one label")]
    DuplicateLeaf(String),
    #[error("label {label} maps to the root; leaves must have depth >= 1")]
    LabelAtRoot { label: usize },
    #[error("hierarchy needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("parent table has {parents} entries for {nodes} nodes")]
    ParentTableMismatch { parents: usize, nodes: usize },
    #[error("unknown label {label}, label space has {k}")]
    UnknownLabel { label: usize, k: usize },
}

/// A rooted tree with labels on (distinct) leaves.
///
/// Node ids are dense indices into `names`; the root is its own parent.
/// Distance queries memoize an all-pairs label table on first use.
#[derive(Debug)]
pub struct Hierarchy {
    names: Vec<String>,
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    root: usize,
    leaf_of_label: Vec<usize>,
    distances: OnceLock<Vec<u32>>,
}

impl Hierarchy {
    /// Builds and validates a hierarchy from a parent table and a
    /// label-to-leaf assignment. `parent[root] == root`.
    pub fn new(
        names: Vec<String>,
        parent: Vec<usize>,
        leaf_of_label: Vec<usize>,
    ) -> Result<Self, HierarchyError> {
        if names.is_empty() {
            return Err(HierarchyError::Empty);
        }
        if parent.len() != names.len() {
            return Err(HierarchyError::ParentTableMismatch {
                parents: parent.len(),
                nodes: names.len(),
            });
        }
        if leaf_of_label.len() < 2 {
            return Err(HierarchyError::TooFewLabels(leaf_of_label.len()));
        }

        let mut root = None;
        for (node, &p) in parent.iter().enumerate() {
            if p == node {
                match root {
                    None => root = Some(node),
                    Some(r) => {
                        return Err(HierarchyError::MultipleRoots(
                            names[r].clone(),
                            names[node].clone(),
                        ))
                    }
                }
            }
        }
        let root = root.ok_or(HierarchyError::NoRoot)?;

        let mut children = vec![Vec::new(); names.len()];
        for (node, &p) in parent.iter().enumerate() {
            if node != root {
                children[p].push(node);
            }
        }

        // Depths via BFS from the root; unreached nodes sit on a cycle or
        // hang off one.
        let mut depth = vec![usize::MAX; names.len()];
        depth[root] = 0;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(node) = queue.pop_front() {
            for &child in &children[node] {
                depth[child] = depth[node] + 1;
                queue.push_back(child);
            }
        }
        if let Some(stray) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(HierarchyError::CycleDetected(names[stray].clone()));
        }

        let mut label_at = vec![None; names.len()];
        for (label, &leaf) in leaf_of_label.iter().enumerate() {
            if leaf >= names.len() || !children[leaf].is_empty() {
                return Err(HierarchyError::LabelNotLeaf {
                    label,
                    node: names.get(leaf).cloned().unwrap_or_else(|| format!("#{leaf}")),
                });
            }
            if leaf == root {
                return Err(HierarchyError::LabelAtRoot { label });
            }
            if label_at[leaf].replace(label).is_some() {
                return Err(HierarchyError::DuplicateLeaf(names[leaf].clone()));
            }
        }

        Ok(Self {
            names,
            parent,
            children,
            depth,
            root,
            leaf_of_label,
            distances: OnceLock::new(),
        })
    }

    /// Uniform-leaf-depth tree over `k` labels built by grouping runs of
    /// `branching` nodes level by level until a single root remains.
    pub fn balanced(k: usize, branching: usize) -> Result<Self, HierarchyError> {
        if k < 2 {
            return Err(HierarchyError::TooFewLabels(k));
        }
        let branching = branching.max(2);
        let mut names: Vec<String> = (0..k).map(|i| format!("leaf{i}")).collect();
        let mut parent = vec![0usize; k];
        let mut level: Vec<usize> = (0..k).collect();
        let mut internal = 0usize;
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len() / branching + 1);
            for chunk in level.chunks(branching) {
                let id = names.len();
                names.push(format!("n{internal}"));
                internal += 1;
                parent.push(id);
                for &child in chunk {
                    parent[child] = id;
                }
                next.push(id);
            }
            level = next;
        }
        let root = level[0];
        parent[root] = root;
        Self::new(names, parent, (0..k).collect())
    }

    pub fn label_count(&self) -> usize {
        self.leaf_of_label.len()
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn node_name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent_table(&self) -> &[usize] {
        &self.parent
    }

    pub fn leaf_table(&self) -> &[usize] {
        &self.leaf_of_label
    }

    fn check_label(&self, label: usize) -> Result<(), HierarchyError> {
        if label >= self.label_count() {
            return Err(HierarchyError::UnknownLabel {
                label,
                k: self.label_count(),
            });
        }
        Ok(())
    }

    /// Number of edges on the unique leaf-to-leaf path between two labels.
    pub fn tree_distance(&self, a: usize, b: usize) -> Result<u32, HierarchyError> {
        self.check_label(a)?;
        self.check_label(b)?;
        if a == b {
            return Ok(0);
        }
        let (mut u, mut v) = (self.leaf_of_label[a], self.leaf_of_label[b]);
        let mut edges = 0u32;
        while self.depth[u] > self.depth[v] {
            u = self.parent[u];
            edges += 1;
        }
        while self.depth[v] > self.depth[u] {
            v = self.parent[v];
            edges += 1;
        }
        while u != v {
            u = self.parent[u];
            v = self.parent[v];
            edges += 2;
        }
        Ok(edges)
    }

    /// Memoized K x K label distance table, row-major.
    pub fn distance_table(&self) -> &[u32] {
        self.distances.get_or_init(|| {
            let k = self.label_count();
            let mut table = vec![0u32; k * k];
            for a in 0..k {
                for b in (a + 1)..k {
                    let d = self.tree_distance(a, b).expect("labels validated");
                    table[a * k + b] = d;
                    table[b * k + a] = d;
                }
            }
            table
        })
    }

    /// Largest pairwise label distance.
    pub fn diameter(&self) -> u32 {
        self.distance_table().iter().copied().max().unwrap_or(0)
    }

    /// Label groups at the second-to-last level (counting levels from the
    /// deepest leaf). Every node at depth `max leaf depth - 1` contributes
    /// the labels in its subtree; labels on shallower leaves are grouped
    /// with their shallow siblings under their own parent.
    pub fn categories(&self) -> Vec<Vec<usize>> {
        let max_leaf_depth = self
            .leaf_of_label
            .iter()
            .map(|&leaf| self.depth[leaf])
            .max()
            .expect("at least two labels");
        let level = max_leaf_depth - 1;

        let mut categories = Vec::new();
        for node in 0..self.node_count() {
            if self.depth[node] == level {
                let members = self.subtree_labels(node);
                if !members.is_empty() {
                    categories.push(members);
                }
            }
        }
        // Shallow leaves (above the category level) grouped per parent.
        let mut shallow: HashMap<usize, Vec<usize>> = HashMap::new();
        for (label, &leaf) in self.leaf_of_label.iter().enumerate() {
            if self.depth[leaf] < level {
                shallow.entry(self.parent[leaf]).or_default().push(label);
            }
        }
        let mut parents: Vec<usize> = shallow.keys().copied().collect();
        parents.sort_unstable();
        for parent in parents {
            let mut members = shallow.remove(&parent).unwrap();
            members.sort_unstable();
            categories.push(members);
        }
        categories
    }

    fn subtree_labels(&self, node: usize) -> Vec<usize> {
        let mut label_of_leaf: HashMap<usize, usize> = HashMap::new();
        for (label, &leaf) in self.leaf_of_label.iter().enumerate() {
            label_of_leaf.insert(leaf, label);
        }
        let mut members = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            if let Some(&label) = label_of_leaf.get(&n) {
                members.push(label);
            }
            stack.extend(&self.children[n]);
        }
        members.sort_unstable();
        members
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Star tree: root with k leaf children.
    fn star(k: usize) -> Hierarchy {
        let mut names = vec!["root".to_string()];
        names.extend((0..k).map(|i| format!("leaf{i}")));
        let mut parent = vec![0usize];
        parent.extend(std::iter::repeat_n(0, k));
        Hierarchy::new(names, parent, (1..=k).collect()).unwrap()
    }

    /// Balanced binary tree over 4 labels, depth 2.
    fn binary4() -> Hierarchy {
        // root(0) -> a(1), b(2); a -> l0(3), l1(4); b -> l2(5), l3(6)
        let names = ["root", "a", "b", "l0", "l1", "l2", "l3"]
            .map(String::from)
            .to_vec();
        let parent = vec![0, 0, 0, 1, 1, 2, 2];
        Hierarchy::new(names, parent, vec![3, 4, 5, 6]).unwrap()
    }

    /// Independent BFS oracle over the explicit node graph.
    fn bfs_distance(h: &Hierarchy, a: usize, b: usize) -> u32 {
        let n = h.node_count();
        let mut adjacency = vec![Vec::new(); n];
        for node in 0..n {
            let p = h.parent_table()[node];
            if p != node {
                adjacency[node].push(p);
                adjacency[p].push(node);
            }
        }
        let start = h.leaf_table()[a];
        let goal = h.leaf_table()[b];
        let mut dist = vec![u32::MAX; n];
        dist[start] = 0;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(node) = queue.pop_front() {
            for &next in &adjacency[node] {
                if dist[next] == u32::MAX {
                    dist[next] = dist[node] + 1;
                    queue.push_back(next);
                }
            }
        }
        dist[goal]
    }

    #[test]
    fn distance_examples() {
        let h = binary4();
        assert_eq!(h.tree_distance(0, 0).unwrap(), 0);
        assert_eq!(h.tree_distance(0, 1).unwrap(), 2);
        // Leaves in different top branches of the 3-level... here 2-level
        // balanced tree: up two edges and down two.
        assert_eq!(h.tree_distance(0, 2).unwrap(), 4);
        assert_eq!(h.tree_distance(0, 2).unwrap(), bfs_distance(&h, 0, 2));
    }

    #[test]
    fn deeper_balanced_tree_matches_bfs_oracle() {
        let h = Hierarchy::balanced(8, 2).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                assert_eq!(h.tree_distance(a, b).unwrap(), bfs_distance(&h, a, b));
            }
        }
        // 3-level balanced binary tree, leaves in different top branches.
        assert_eq!(h.tree_distance(0, 7).unwrap(), 6);
        assert_eq!(h.tree_distance(0, 2).unwrap(), 4);
    }

    #[test]
    fn distances_are_symmetric_and_satisfy_triangle_inequality() {
        for h in [star(6), binary4(), Hierarchy::balanced(20, 3).unwrap()] {
            let k = h.label_count();
            for a in 0..k {
                for b in 0..k {
                    let dab = h.tree_distance(a, b).unwrap();
                    assert_eq!(dab, h.tree_distance(b, a).unwrap());
                    assert_eq!(dab == 0, a == b);
                    for c in 0..k {
                        let dac = h.tree_distance(a, c).unwrap();
                        let dcb = h.tree_distance(c, b).unwrap();
                        assert!(dab <= dac + dcb);
                    }
                }
            }
        }
    }

    #[test]
    fn diameter_equals_table_maximum() {
        assert_eq!(star(5).diameter(), 2);
        assert_eq!(star(2).diameter(), 2);
        let h = Hierarchy::balanced(16, 2).unwrap();
        let k = h.label_count();
        let mut max = 0;
        for a in 0..k {
            for b in 0..k {
                max = max.max(bfs_distance(&h, a, b));
            }
        }
        assert_eq!(h.diameter(), max);
    }

    #[test]
    fn path_shaped_tree_diameter() {
        // root -> shallow leaf (depth 1) and a chain to a deep leaf (depth 3).
        let names = ["root", "s", "m1", "m2", "d"].map(String::from).to_vec();
        let parent = vec![0, 0, 0, 2, 3];
        let h = Hierarchy::new(names, parent, vec![1, 4]).unwrap();
        assert_eq!(h.diameter(), 4);
    }

    #[test]
    fn categories_on_uniform_trees_partition_labels() {
        let star = star(7);
        assert_eq!(star.categories(), vec![(0..7).collect::<Vec<_>>()]);

        let h = binary4();
        assert_eq!(h.categories(), vec![vec![0, 1], vec![2, 3]]);

        let deep = Hierarchy::balanced(27, 3).unwrap();
        let cats = deep.categories();
        assert_eq!(cats.len(), 9);
        let mut all: Vec<usize> = cats.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..27).collect::<Vec<_>>());
    }

    #[test]
    fn ragged_tree_keeps_every_label_covered() {
        // root -> shallow leaf l0; root -> a -> (l1, b); b -> (l2, l3).
        let names = ["root", "l0", "a", "l1", "b", "l2", "l3"]
            .map(String::from)
            .to_vec();
        let parent = vec![0, 0, 0, 2, 2, 4, 4];
        let h = Hierarchy::new(names, parent, vec![1, 3, 5, 6]).unwrap();
        let cats = h.categories();
        let mut covered: Vec<usize> = cats.iter().flatten().copied().collect();
        covered.sort_unstable();
        covered.dedup();
        assert_eq!(covered, vec![0, 1, 2, 3]);
    }

    #[test]
    fn validation_rejects_cycles_and_bad_labels() {
        // Two nodes pointing at each other, detached from the root.
        let names = ["root", "x", "y", "leaf0", "leaf1"].map(String::from).to_vec();
        let parent = vec![0, 2, 1, 0, 0];
        let err = Hierarchy::new(names, parent, vec![3, 4]);
        assert!(matches!(err, Err(HierarchyError::CycleDetected(_))));

        // Label on an internal node.
        let names = ["root", "mid", "leaf0", "leaf1"].map(String::from).to_vec();
        let parent = vec![0, 0, 1, 1];
        let err = Hierarchy::new(names, parent, vec![1, 2]);
        assert!(matches!(err, Err(HierarchyError::LabelNotLeaf { label: 0, .. })));

        let err = star(3).tree_distance(0, 9);
        assert!(matches!(err, Err(HierarchyError::UnknownLabel { label: 9, .. })));
    }

    #[test]
    fn balanced_builder_has_uniform_leaf_depth() {
        for (k, b) in [(20, 5), (20, 4), (7, 2), (100, 10)] {
            let h = Hierarchy::balanced(k, b).unwrap();
            let depths: Vec<usize> = (0..k)
                .map(|label| {
                    let mut node = h.leaf_table()[label];
                    let mut d = 0;
                    while h.parent_table()[node] != node {
                        node = h.parent_table()[node];
                        d += 1;
                    }
                    d
                })
                .collect();
            assert!(depths.windows(2).all(|w| w[0] == w[1]), "k={k} b={b}");
        }
    }
}
