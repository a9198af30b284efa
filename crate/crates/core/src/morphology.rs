//! Connected-component decomposition of label volumes and left/right kidney
//! assignment.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volgrid::{centroid_of_indices, CenterOfMass, Geometry, LabelGrid};

/// Voxel neighbourhood used to connect labeled voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    /// Face neighbours only.
    #[default]
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Self::Six),
            26 => Ok(Self::TwentySix),
            other => Err(Error::InvalidParameter(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Six => 6,
            Self::TwentySix => 26,
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Self::Six => manhattan == 1,
                        Self::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

/// One maximal connected set of labeled voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Linear voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub com: CenterOfMass,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }
}

/// Components sorted by size, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    pub geometry: Geometry,
    pub components: Vec<Component>,
    pub connectivity: Connectivity,
}

impl ComponentSet {
    pub fn total_voxels(&self) -> usize {
        self.components.iter().map(Component::size).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.components.iter().map(Component::size).collect()
    }
}

/// Partition the labeled voxels into maximal connected sets.
///
/// Seeds are visited in storage order and every component's voxel list is
/// sorted, so the result does not depend on traversal details. Ordering is by
/// size descending, then by COM x ascending, then by first voxel index.
pub fn connected_components(labels: &LabelGrid, connectivity: Connectivity) -> ComponentSet {
    let geometry = *labels.geometry();
    let [nx, ny, nz] = geometry.dims;
    let values = labels.values();
    let offsets = connectivity.offsets();
    let mut visited = vec![false; values.len()];
    let mut queue = VecDeque::new();
    let mut components = Vec::new();

    for seed in 0..values.len() {
        if values[seed] == 0 || visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        let mut voxels = Vec::new();
        while let Some(current) = queue.pop_front() {
            voxels.push(current);
            let [x, y, z] = geometry.index_of(current);
            for off in &offsets {
                let (xx, yy, zz) = (
                    x as isize + off[0],
                    y as isize + off[1],
                    z as isize + off[2],
                );
                if xx < 0
                    || yy < 0
                    || zz < 0
                    || xx as usize >= nx
                    || yy as usize >= ny
                    || zz as usize >= nz
                {
                    continue;
                }
                let n = geometry.linear_index([xx as usize, yy as usize, zz as usize]);
                if values[n] != 0 && !visited[n] {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
        voxels.sort_unstable();
        let com = centroid_of_indices(&geometry, voxels.iter().copied())
            .expect("component has at least its seed voxel");
        components.push(Component { voxels, com });
    }

    components.sort_by(|a, b| {
        b.size()
            .cmp(&a.size())
            .then(a.com.position[0].total_cmp(&b.com.position[0]))
            .then(a.voxels[0].cmp(&b.voxels[0]))
    });
    ComponentSet {
        geometry,
        components,
        connectivity,
    }
}

/// The two largest components assigned to anatomical sides.
#[derive(Debug, Clone, PartialEq)]
pub struct KidneyPair {
    pub left: Option<Component>,
    pub right: Option<Component>,
    /// Labeled voxels outside the two largest components.
    pub scrap_voxels: usize,
}

impl KidneyPair {
    pub fn left_size(&self) -> usize {
        self.left.as_ref().map_or(0, Component::size)
    }

    pub fn right_size(&self) -> usize {
        self.right.as_ref().map_or(0, Component::size)
    }
}

/// Assign the two largest components to left and right by COM x.
///
/// Larger x is toward the subject's left. A lone component is left when its
/// COM lies beyond `midline_x`, otherwise right.
pub fn split_pair(set: &ComponentSet, midline_x: f64) -> KidneyPair {
    let total = set.total_voxels();
    let (left, right) = match set.components.as_slice() {
        [] => (None, None),
        [only] => {
            if only.com.position[0] > midline_x {
                (Some(only.clone()), None)
            } else {
                (None, Some(only.clone()))
            }
        }
        [first, second, ..] => {
            if first.com.position[0] > second.com.position[0] {
                (Some(first.clone()), Some(second.clone()))
            } else {
                (Some(second.clone()), Some(first.clone()))
            }
        }
    };
    let kept = left.as_ref().map_or(0, Component::size) + right.as_ref().map_or(0, Component::size);
    KidneyPair {
        left,
        right,
        scrap_voxels: total - kept,
    }
}
