//! Minimal exact 3-D kd-tree for nearest-neighbor distance queries.

use nalgebra::Vector3;

struct Node {
    point: Vector3<f64>,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

pub struct KdTree {
    root: Option<Box<Node>>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut owned: Vec<Vector3<f64>> = points.to_vec();
        Self {
            root: build_node(&mut owned, 0),
        }
    }

    /// Distance to the nearest stored point; `None` for an empty tree.
    pub fn nearest_distance(&self, query: &Vector3<f64>) -> Option<f64> {
        self.root.as_ref().map(|root| {
            let mut best = f64::INFINITY;
            search(root, query, &mut best);
            best.sqrt()
        })
    }
}

fn build_node(points: &mut [Vector3<f64>], depth: usize) -> Option<Box<Node>> {
    if points.is_empty() {
        return None;
    }
    let axis = depth % 3;
    points.sort_by(|a, b| a[axis].partial_cmp(&b[axis]).unwrap());
    let median = points.len() / 2;
    let point = points[median];
    let (left, rest) = points.split_at_mut(median);
    let right = &mut rest[1..];
    Some(Box::new(Node {
        point,
        axis,
        left: build_node(left, depth + 1),
        right: build_node(right, depth + 1),
    }))
}

fn search(node: &Node, query: &Vector3<f64>, best_sq: &mut f64) {
    let dist_sq = (node.point - query).norm_squared();
    if dist_sq < *best_sq {
        *best_sq = dist_sq;
    }
    let diff = query[node.axis] - node.point[node.axis];
    let (near, far) = if diff <= 0.0 {
        (&node.left, &node.right)
    } else {
        (&node.right, &node.left)
    };
    if let Some(child) = near {
        search(child, query, best_sq);
    }
    if diff * diff < *best_sq {
        if let Some(child) = far {
            search(child, query, best_sq);
        }
    }
}
