use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestPoint {
    pub point: Vec3,
    pub distance: f64,
    pub face: usize,
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: Vec3,
    hi: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Vec3::repeat(f64::INFINITY),
            hi: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn dist2(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = if p[k] < self.lo[k] {
                self.lo[k] - p[k]
            } else if p[k] > self.hi[k] {
                p[k] - self.hi[k]
            } else {
                0.0
            };
            d += v * v;
        }
        d
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaves cover `order[start..start + count]`; inner nodes have `count == 0`.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

const LEAF_SIZE: usize = 4;

/// Median-split bounding-volume hierarchy over a triangle mesh.
#[derive(Clone, Debug)]
pub struct Bvh {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub fn build(vertices: &[Vec3], faces: &[[u32; 3]]) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Invalid("cannot measure distance to an empty mesh".into()));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i as usize >= vertices.len())) {
            return Err(Error::Invalid(alloc::format!("face {f:?} indexes past the vertex list")));
        }
        let centroids: Vec<Vec3> = faces
            .iter()
            .map(|f| (vertices[f[0] as usize] + vertices[f[1] as usize] + vertices[f[2] as usize]) / 3.0)
            .collect();
        let mut bvh = Bvh {
            vertices: vertices.to_vec(),
            faces: faces.to_vec(),
            nodes: Vec::with_capacity(2 * faces.len() / LEAF_SIZE + 1),
            order: (0..faces.len()).collect(),
        };
        bvh.split(0, faces.len(), &centroids);
        Ok(bvh)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    fn split(&mut self, start: usize, count: usize, centroids: &[Vec3]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &f in &self.order[start..start + count] {
            for &v in &self.faces[f] {
                bounds.grow(&self.vertices[v as usize]);
            }
            cb.grow(&centroids[f]);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            bounds,
            start,
            count,
            left: usize::MAX,
            right: usize::MAX,
        });
        if count <= LEAF_SIZE {
            return id;
        }
        let ext = cb.hi - cb.lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = count / 2;
        self.order[start..start + count].select_nth_unstable_by(mid, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = self.split(start, mid, centroids);
        let right = self.split(start + mid, count - mid, centroids);
        let n = &mut self.nodes[id];
        n.left = left;
        n.right = right;
        n.count = 0;
        id
    }

    fn face_closest(&self, f: usize, p: &Vec3) -> (Vec3, f64) {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        let q = closest_point_on_triangle(p, &a, &b, &c);
        (q, (q - p).norm_squared())
    }

    /// Exact closest point on the mesh. Ties go to the lower face index.
    pub fn closest(&self, p: &Vec3) -> ClosestPoint {
        let mut best = (Vec3::zeros(), f64::INFINITY, usize::MAX);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = self.nodes[id];
            if node.bounds.dist2(p) > best.1 {
                continue;
            }
            if node.left == usize::MAX {
                for &f in &self.order[node.start..node.start + node.count] {
                    let (q, d) = self.face_closest(f, p);
                    if d < best.1 || (d == best.1 && f < best.2) {
                        best = (q, d, f);
                    }
                }
            } else {
                let dl = self.nodes[node.left].bounds.dist2(p);
                let dr = self.nodes[node.right].bounds.dist2(p);
                if dl <= dr {
                    stack.push(node.right);
                    stack.push(node.left);
                } else {
                    stack.push(node.left);
                    stack.push(node.right);
                }
            }
        }
        ClosestPoint {
            point: best.0,
            distance: crate::math::sqrt(best.1),
            face: best.2,
        }
    }
}
