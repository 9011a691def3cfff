/// Complete binary tree of partial sums over a power-of-two number of leaves.
///
/// Node `1` is the root, node `i` has children `2i` and `2i + 1`, and leaves
/// occupy `capacity..2 * capacity`. Internal nodes are always recomputed as
/// `left + right`, so every node is exactly the sum of its children and a
/// tree rebuilt from its leaves is bitwise identical to the original.
#[derive(Clone, Debug, PartialEq)]
pub struct SumTree {
    nodes: Vec<f64>,
    capacity: usize,
}

impl SumTree {
    pub fn new(min_leaves: usize) -> Self {
        let capacity = min_leaves.max(1).next_power_of_two();
        Self {
            nodes: vec![0.0; 2 * capacity],
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn leaf(&self, index: usize) -> f64 {
        self.nodes[self.capacity + index]
    }

    pub fn leaves(&self) -> &[f64] {
        &self.nodes[self.capacity..]
    }

    pub fn set(&mut self, index: usize, value: f64) {
        assert!(index < self.capacity, "leaf {index} out of range");
        debug_assert!(value >= 0.0 && value.is_finite());
        let mut i = self.capacity + index;
        self.nodes[i] = value;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
        // `capacity == 1` leaves the leaf at node 1 which is also the root.
    }

    /// Leaf `i` such that `prefix(i) <= u < prefix(i + 1)`, where `prefix(i)`
    /// is the sum of leaves before `i`. Values at or beyond the total map to
    /// the last leaf with positive mass.
    pub fn find(&self, u: f64) -> usize {
        let mut i = 1;
        let mut u = u.max(0.0);
        while i < self.capacity {
            let left = self.nodes[2 * i];
            if u < left {
                i *= 2;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        let mut leaf = i - self.capacity;
        // Rounding can push the descent onto an empty leaf past the end.
        if self.leaf(leaf) == 0.0 {
            if let Some(last) = self.leaves().iter().rposition(|v| *v > 0.0) {
                if last < leaf {
                    leaf = last;
                } else if let Some(next) = self.leaves()[leaf..].iter().position(|v| *v > 0.0) {
                    leaf += next;
                }
            }
        }
        leaf
    }

    pub fn rebuild(leaves: &[f64], capacity: usize) -> Self {
        let mut tree = Self::new(capacity);
        tree.nodes[tree.capacity..tree.capacity + leaves.len()].copy_from_slice(leaves);
        for i in (1..tree.capacity).rev() {
            tree.nodes[i] = tree.nodes[2 * i] + tree.nodes[2 * i + 1];
        }
        tree
    }

    /// Checks that every internal node equals the sum of its children.
    pub fn is_consistent(&self, tol: f64) -> bool {
        (1..self.capacity).all(|i| (self.nodes[i] - (self.nodes[2 * i] + self.nodes[2 * i + 1])).abs() <= tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn linear_scan(leaves: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        for (i, v) in leaves.iter().enumerate() {
            acc += v;
            if u < acc {
                return i;
            }
        }
        leaves.iter().rposition(|v| *v > 0.0).unwrap()
    }

    #[test]
    fn sums_and_find() {
        let mut t = SumTree::new(8);
        for i in 0..8 {
            t.set(i, i as f64);
        }
        assert_eq!(t.total(), 28.0);
        assert_eq!(t.find(4.0), 3);
        assert_eq!(t.find(18.0), 6);
        assert_eq!(t.find(0.0), 1, "empty leaf 0 is never selected");
        assert_eq!(t.find(1e9), 7);
    }

    #[test]
    fn rounds_capacity_up() {
        assert_eq!(SumTree::new(5).capacity(), 8);
        assert_eq!(SumTree::new(0).capacity(), 1);
        let mut t = SumTree::new(1);
        t.set(0, 2.5);
        assert_eq!(t.total(), 2.5);
        assert_eq!(t.find(1.0), 0);
    }

    #[test]
    fn randomized_updates_match_flat_sum() {
        let mut rng = seeded(3);
        let mut t = SumTree::new(300);
        let mut flat = vec![0.0; 300];
        for _ in 0..100_000 {
            let i = rng.random_range(0..300);
            let v = rng.random_range(0.0..10.0);
            t.set(i, v);
            flat[i] = v;
        }
        let direct: f64 = flat.iter().sum();
        assert!((t.total() - direct).abs() <= 1e-9);
        assert!(t.is_consistent(0.0));
        assert_eq!(SumTree::rebuild(&flat, 300), t);
    }

    #[test]
    fn descent_equals_linear_scan() {
        let mut rng = seeded(4);
        for &n in &[1usize, 7, 64, 1000, 1024] {
            let leaves: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
            let t = SumTree::rebuild(&leaves, n);
            for _ in 0..2000 {
                let u = rng.random_range(0.0..t.total());
                assert_eq!(t.find(u), linear_scan(&leaves, u));
            }
        }
    }
}
