//! Sparse voxel feature repository.
//!
//! A repository stores one row per occupied voxel: the integer voxel key, the
//! mean coordinate of the member points, a feature vector and a foreground
//! confidence. Features and confidences are graph variables so that gradients
//! reach everything that produced them.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{Graph, Linear, Mlp, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::rng::SeededRng;
use crate::sampling::Coord;

pub type VoxelKey = [i64; 3];

pub fn voxel_key(p: &Coord, voxel_size: &[f64; 3]) -> VoxelKey {
    [
        (p[0] / voxel_size[0]).floor() as i64,
        (p[1] / voxel_size[1]).floor() as i64,
        (p[2] / voxel_size[2]).floor() as i64,
    ]
}

fn check_voxel_size(vs: &[f64; 3]) -> Result<()> {
    if vs.iter().all(|v| *v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("voxel size must be positive, got {vs:?}")))
    }
}

/// Sorted voxel support with key lookup.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Support {
    keys: Vec<VoxelKey>,
    lookup: BTreeMap<VoxelKey, usize>,
}

impl Support {
    pub fn from_keys(keys: impl IntoIterator<Item = VoxelKey>) -> Self {
        let lookup: BTreeMap<VoxelKey, usize> = keys.into_iter().map(|k| (k, 0)).collect();
        let keys: Vec<VoxelKey> = lookup.keys().copied().collect();
        let lookup = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        Self { keys, lookup }
    }

    pub fn keys(&self) -> &[VoxelKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, k: &VoxelKey) -> Option<usize> {
        self.lookup.get(k).copied()
    }

    /// Support of a stride-2, 3×3×3 convolution over this one: every coarse
    /// site `o` with some occupied fine site in `2o + {-1,0,1}³`.
    pub fn downsampled(&self) -> Self {
        let mut out = BTreeMap::new();
        for k in &self.keys {
            let ranges = k.map(|v| (v - 1).div_euclid(2)..=(v + 1).div_euclid(2));
            for x in ranges[0].clone() {
                for y in ranges[1].clone() {
                    for z in ranges[2].clone() {
                        let o = [x, y, z];
                        let covered = (0..3).all(|a| (2 * o[a] - k[a]).abs() <= 1);
                        if covered {
                            out.insert(o, 0usize);
                        }
                    }
                }
            }
        }
        Self::from_keys(out.into_keys())
    }
}

fn kernel_offsets() -> impl Iterator<Item = [i64; 3]> {
    (0..27).map(|i| [i / 9 - 1, (i / 3) % 3 - 1, i % 3 - 1])
}

#[derive(Debug, Clone)]
pub struct FeatureRepository {
    pub voxel_size: [f64; 3],
    pub support: Support,
    /// Mean member coordinate per voxel.
    pub means: Vec<Coord>,
    pub counts: Vec<usize>,
    /// `[K, width]`
    pub features: Var,
    /// Foreground confidence, `[K, 1]`.
    pub s_r: Var,
}

impl FeatureRepository {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn keys(&self) -> &[VoxelKey] {
        self.support.keys()
    }
}

/// Groups points by voxel and averages their coordinates and feature rows.
/// Voxels are ordered by key. Confidence starts at zero.
pub fn voxelize_mean(g: &mut Graph, coords: &[Coord], features: Var, voxel_size: [f64; 3]) -> Result<FeatureRepository> {
    check_voxel_size(&voxel_size)?;
    if g.shape(features).first() != Some(&coords.len()) {
        return Err(invalid(format!(
            "{} points but feature shape {:?}",
            coords.len(),
            g.shape(features)
        )));
    }
    let keys: Vec<VoxelKey> = coords.iter().map(|p| voxel_key(p, &voxel_size)).collect();
    let support = Support::from_keys(keys.iter().copied());
    let k = support.len();
    let target: Vec<usize> = keys.iter().map(|key| support.index_of(key).unwrap_or(0)).collect();
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &t) in coords.iter().zip(&target) {
        for a in 0..3 {
            sums[t][a] += p[a];
        }
        counts[t] += 1;
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s.map(|v| v / c as f64))
        .collect();
    let features = g.scatter_mean(features, target, k)?;
    let s_r = g.constant(Tensor::zeros(&[k, 1]));
    Ok(FeatureRepository {
        voxel_size,
        support,
        means,
        counts,
        features,
        s_r,
    })
}

/// Sparse features on a voxel support; unlisted voxels read as zero.
#[derive(Debug, Clone)]
pub struct SparseKnowledge {
    pub support: Support,
    /// `[support.len(), width]`
    pub features: Var,
}

/// Places partial features at their voxels on the repository grid. The
/// support is the repository's plus any voxel holding a partial point; rows
/// without partial points are zero and colliding points are averaged.
pub fn scatter_knowledge(
    g: &mut Graph,
    coords: &[Coord],
    features: Var,
    repo: &FeatureRepository,
) -> Result<SparseKnowledge> {
    let keys: Vec<VoxelKey> = coords.iter().map(|p| voxel_key(p, &repo.voxel_size)).collect();
    let support = Support::from_keys(repo.keys().iter().copied().chain(keys.iter().copied()));
    let target = keys.iter().map(|k| support.index_of(k).unwrap_or(0)).collect();
    let features = g.scatter_mean(features, target, support.len())?;
    Ok(SparseKnowledge { support, features })
}

/// Reads `features` (on `from`) at each voxel of `to`; voxels missing from
/// `from` give zero rows.
pub fn align(g: &mut Graph, features: Var, from: &Support, to: &Support) -> Result<Var> {
    let idx = to.keys().iter().map(|k| from.index_of(k)).collect();
    g.gather_rows(features, idx)
}

/// Sparse 3×3×3 convolution layer, stored as a `[27·c_in, c_out]` matrix.
#[derive(Debug, Clone, Copy)]
pub struct SparseConv {
    pub lin: Linear,
    pub c_in: usize,
}

impl SparseConv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(store, name, 27 * c_in, c_out, rng)?,
            c_in,
        })
    }

    /// Stride-2 convolution from `fine` onto `coarse`: site `o` reads the fine
    /// sites `2o + δ`.
    pub fn down(&self, g: &mut Graph, store: &ParamStore, x: Var, fine: &Support, coarse: &Support) -> Result<Var> {
        let mut idx = Vec::with_capacity(coarse.len() * 27);
        for o in coarse.keys() {
            for d in kernel_offsets() {
                idx.push(fine.index_of(&[2 * o[0] + d[0], 2 * o[1] + d[1], 2 * o[2] + d[2]]));
            }
        }
        self.apply(g, store, x, idx, coarse.len())
    }

    /// Transposed stride-2 convolution from `coarse` back onto `fine`: fine
    /// site `p` receives from coarse `o` when `p = 2o + δ`.
    pub fn up(&self, g: &mut Graph, store: &ParamStore, x: Var, coarse: &Support, fine: &Support) -> Result<Var> {
        let mut idx = Vec::with_capacity(fine.len() * 27);
        for p in fine.keys() {
            for d in kernel_offsets() {
                let q = [p[0] - d[0], p[1] - d[1], p[2] - d[2]];
                let src = if q.iter().all(|v| v.rem_euclid(2) == 0) {
                    coarse.index_of(&q.map(|v| v.div_euclid(2)))
                } else {
                    None
                };
                idx.push(src);
            }
        }
        self.apply(g, store, x, idx, fine.len())
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, idx: Vec<Option<usize>>, n_out: usize) -> Result<Var> {
        let c = g.shape(x)[1];
        if c != self.c_in {
            return Err(Error::WidthMismatch {
                expected: self.c_in,
                found: c,
            });
        }
        let cols = g.gather_rows(x, idx)?;
        let cols = g.reshape(cols, vec![n_out, 27 * c])?;
        self.lin.forward(g, store, cols)
    }
}

/// Two stride-2 downsamplings and two transposed upsamplings with additive
/// shortcuts between equal resolutions. Channels are
/// `[c0, c1, c2, c3, c4]` with `c3 == c1` and `c4 == c0`.
#[derive(Debug, Clone)]
pub struct EncoderDecoder {
    pub stem: Linear,
    pub down1: SparseConv,
    pub down2: SparseConv,
    pub up1: SparseConv,
    pub up2: SparseConv,
    pub channels: Vec<usize>,
}

/// Voxel supports of the three resolutions visited by [`EncoderDecoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub levels: [Support; 3],
}

impl Pyramid {
    pub fn new(base: &Support) -> Self {
        let l1 = base.downsampled();
        let l2 = l1.downsampled();
        Self {
            levels: [base.clone(), l1, l2],
        }
    }
}

impl EncoderDecoder {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, channels: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if channels.len() != 5 || channels[3] != channels[1] || channels[4] != channels[0] {
            return Err(invalid(format!(
                "encoder-decoder channels must be [c0, c1, c2, c1, c0], got {channels:?}"
            )));
        }
        let c = channels;
        Ok(Self {
            stem: Linear::new(store, &format!("{name}.stem"), c_in, c[0], rng)?,
            down1: SparseConv::new(store, &format!("{name}.down1"), c[0], c[1], rng)?,
            down2: SparseConv::new(store, &format!("{name}.down2"), c[1], c[2], rng)?,
            up1: SparseConv::new(store, &format!("{name}.up1"), c[2], c[3], rng)?,
            up2: SparseConv::new(store, &format!("{name}.up2"), c[3], c[4], rng)?,
            channels: channels.to_vec(),
        })
    }

    pub fn out_width(&self) -> usize {
        self.channels[4]
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params()
            + [self.down1, self.down2, self.up1, self.up2]
                .iter()
                .map(|c| c.lin.num_params())
                .sum::<usize>()
    }

    /// Scene features on the knowledge support, `[K, c4]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, k: &SparseKnowledge) -> Result<Var> {
        let pyr = Pyramid::new(&k.support);
        let [l0, l1, l2] = &pyr.levels;
        let x0 = self.stem.forward(g, store, k.features)?;
        let x0 = g.relu(x0);
        let x1 = self.down1.down(g, store, x0, l0, l1)?;
        let x1 = g.relu(x1);
        let x2 = self.down2.down(g, store, x1, l1, l2)?;
        let x2 = g.relu(x2);
        let y1 = self.up1.up(g, store, x2, l2, l1)?;
        let y1 = g.add(y1, x1)?;
        let y1 = g.relu(y1);
        let y0 = self.up2.up(g, store, y1, l1, l0)?;
        let y0 = g.add(y0, x0)?;
        Ok(g.relu(y0))
    }
}

/// Repository update: `S_R ⊙ proj(scene) + MLP(R)`.
///
/// `proj` maps the encoder-decoder width to the repository width and is
/// absent when they already agree.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub proj: Option<Linear>,
    pub mlp: Mlp,
}

impl Fusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        scene_width: usize,
        repo_width: usize,
        out_width: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let proj = if scene_width == out_width {
            None
        } else {
            Some(Linear::new(store, &format!("{name}.proj"), scene_width, out_width, rng)?)
        };
        let mlp = Mlp::new(store, &format!("{name}.mlp"), repo_width, &[out_width, out_width], false, rng)?;
        Ok(Self { proj, mlp })
    }

    pub fn out_width(&self) -> usize {
        self.mlp.out_width()
    }

    pub fn num_params(&self) -> usize {
        self.proj.map_or(0, |p| p.num_params()) + self.mlp.num_params()
    }
}

/// Fuses scene features (already aligned to the repository voxels) into the
/// repository. Voxel support, means and confidences are unchanged.
pub fn fuse_repository(
    g: &mut Graph,
    store: &ParamStore,
    fusion: &Fusion,
    repo: &FeatureRepository,
    scene: Var,
    s_r: Var,
) -> Result<FeatureRepository> {
    let scene = match &fusion.proj {
        Some(p) => p.forward(g, store, scene)?,
        None => scene,
    };
    let gated = g.mul_col(scene, s_r)?;
    let base = fusion.mlp.forward(g, store, repo.features)?;
    if g.shape(base) != g.shape(gated) {
        return Err(Error::WidthMismatch {
            expected: g.shape(gated)[1],
            found: g.shape(base)[1],
        });
    }
    let features = g.add(gated, base)?;
    Ok(FeatureRepository {
        features,
        s_r,
        ..repo.clone()
    })
}
