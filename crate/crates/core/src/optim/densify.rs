//! Adaptive density control: splitting, gap filling and pruning.
//!
//! Every operation reports which Gaussians survived and how many were
//! appended, so optimizer moments can be kept aligned with the scene.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::scene::gaussian::{logit, PARAMS_PER_GAUSSIAN};
use crate::scene::{Gaussian3D, GaussianScene};
use crate::spatial::KdTree;

use super::adam::Adam;

/// Survivors keep their relative order; `added` new Gaussians follow them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edit {
    pub keep: Vec<bool>,
    pub added: usize,
}

impl Edit {
    pub fn removed(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn is_noop(&self) -> bool {
        self.added == 0 && self.keep.iter().all(|k| *k)
    }

    /// Applies the same edit to optimizer moments laid out per Gaussian.
    pub fn apply_to(&self, adam: &mut Adam) {
        adam.retain_blocks(PARAMS_PER_GAUSSIAN, &self.keep);
        adam.extend_zeros(self.added * PARAMS_PER_GAUSSIAN);
    }
}

fn rebuild(scene: &mut GaussianScene, keep: &[bool], added: Vec<Gaussian3D>) {
    let mut gaussians: Vec<Gaussian3D> = scene
        .gaussians
        .iter()
        .zip(keep)
        .filter(|(_, k)| **k)
        .map(|(g, _)| *g)
        .collect();
    gaussians.extend(added);
    let step = scene.step;
    *scene = GaussianScene::new(gaussians);
    scene.step = step;
}

/// Replaces every Gaussian whose mean view-space gradient exceeds
/// `threshold` by two children drawn from its density, with scales divided
/// by `divisor`. Parents are taken in index order while the count stays
/// within `max_gaussians`. Statistics are reset afterwards.
pub fn densify_split<R: Rng + ?Sized>(
    scene: &mut GaussianScene,
    threshold: f64,
    divisor: f64,
    max_gaussians: usize,
    rng: &mut R,
) -> Edit {
    let mut keep = vec![true; scene.len()];
    let mut children = Vec::new();
    let mut count = scene.len();
    for i in 0..scene.len() {
        if count >= max_gaussians {
            break;
        }
        if scene.mean_view_grad(i) <= threshold {
            continue;
        }
        let g = scene.gaussians[i];
        let r = g.rotation_matrix();
        let s = g.scale();
        for _ in 0..2 {
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let mut child = g;
            child.mean = g.mean + r * s.component_mul(&z);
            child.log_scale = g.log_scale.add_scalar(-divisor.ln());
            children.push(child);
        }
        keep[i] = false;
        count += 1;
    }
    let edit = Edit {
        keep,
        added: children.len(),
    };
    rebuild(scene, &edit.keep, children);
    edit
}

/// Gaussian filling the gap between `a` and `b`, if their centers are
/// farther apart than the sum of their radii.
pub fn gap_filler(a: &Gaussian3D, b: &Gaussian3D) -> Option<Gaussian3D> {
    let (ra, rb) = (a.mean_scale(), b.mean_scale());
    let delta = b.mean - a.mean;
    let d = delta.norm();
    if !(d > ra + rb) {
        return None;
    }
    let u = delta / d;
    let radius = (d - ra - rb) / 2.0;
    let center = a.mean + u * (ra + radius);
    let opacity = (a.opacity() + b.opacity()) / 2.0;
    let color = (a.color + b.color) / 2.0;
    let mut g = Gaussian3D::isotropic(center, radius, 0.5, color);
    g.opacity_logit = logit(opacity);
    Some(g)
}

/// Inserts a Gaussian into every gap between a Gaussian and one of its `k`
/// nearest neighbours. Each unordered pair is considered once.
pub fn densify_compact(scene: &mut GaussianScene, k: usize, max_gaussians: usize) -> Edit {
    let n = scene.len();
    let means: Vec<Vector3<f64>> = scene.gaussians.iter().map(|g| g.mean).collect();
    let tree = KdTree::new(&means);
    let mut pairs = BTreeSet::new();
    for (i, m) in means.iter().enumerate() {
        for (j, _) in tree.k_nearest(m, k, Some(i)) {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let room = max_gaussians.saturating_sub(n);
    let added: Vec<Gaussian3D> = pairs
        .into_iter()
        .filter_map(|(i, j)| gap_filler(&scene.gaussians[i], &scene.gaussians[j]))
        .take(room)
        .collect();
    let edit = Edit {
        keep: vec![true; n],
        added: added.len(),
    };
    if !added.is_empty() {
        let (accum, count) = (scene.grad_accum.clone(), scene.grad_count.clone());
        rebuild(scene, &edit.keep, added);
        scene.grad_accum[..n].copy_from_slice(&accum);
        scene.grad_count[..n].copy_from_slice(&count);
    }
    edit
}

/// Removes Gaussians with opacity below `min_opacity` or mean scale above
/// `max_radius`. When fewer than `floor` would survive, the most opaque
/// condemned Gaussians are kept to reach the floor.
pub fn prune(scene: &mut GaussianScene, min_opacity: f64, max_radius: f64, floor: usize) -> Edit {
    let mut keep: Vec<bool> = scene
        .gaussians
        .iter()
        .map(|g| !(g.opacity() < min_opacity || g.mean_scale() > max_radius))
        .collect();
    let survivors = keep.iter().filter(|k| **k).count();
    let want = floor.min(scene.len());
    if survivors < want {
        let mut condemned: Vec<usize> = (0..scene.len()).filter(|&i| !keep[i]).collect();
        condemned.sort_by(|&a, &b| {
            scene.gaussians[b]
                .opacity_logit
                .total_cmp(&scene.gaussians[a].opacity_logit)
                .then(a.cmp(&b))
        });
        for &i in condemned.iter().take(want - survivors) {
            keep[i] = true;
        }
    }
    let edit = Edit { keep, added: 0 };
    if !edit.is_noop() {
        let (accum, count): (Vec<f64>, Vec<u32>) = (0..scene.len())
            .filter(|&i| edit.keep[i])
            .map(|i| (scene.grad_accum[i], scene.grad_count[i]))
            .unzip();
        rebuild(scene, &edit.keep, Vec::new());
        scene.grad_accum = accum;
        scene.grad_count = count;
    }
    edit
}
