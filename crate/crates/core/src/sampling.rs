//! Point selection and neighborhood grouping.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};

pub type Coord = [f64; 3];

pub fn dist(a: &Coord, b: &Coord) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Farthest point sampling: starting from `start`, repeatedly picks the
/// unselected point farthest from the selected set. Ties go to the lowest
/// index.
pub fn fps(coords: &[Coord], m: usize, start: usize) -> Result<Vec<usize>> {
    weighted_fps(coords, None, m, start)
}

/// Score-weighted farthest point sampling: the criterion is
/// `score^gamma * distance`. With `gamma == 0` this is exactly [`fps`].
pub fn sfps(coords: &[Coord], scores: &[f64], m: usize, gamma: f64, start: usize) -> Result<Vec<usize>> {
    if scores.len() != coords.len() {
        return Err(invalid(alloc::format!(
            "{} scores for {} points",
            scores.len(),
            coords.len()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(invalid("sfps exponent must be non-negative"));
    }
    if gamma == 0.0 {
        return weighted_fps(coords, None, m, start);
    }
    let w: Vec<f64> = scores.iter().map(|s| s.max(0.0).powf(gamma)).collect();
    weighted_fps(coords, Some(&w), m, start)
}

fn weighted_fps(coords: &[Coord], weights: Option<&[f64]>, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(invalid(alloc::format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(invalid(alloc::format!("start index {start} out of range for {n} points")));
    }
    let mut selected = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start;
    for _ in 0..m {
        out.push(cur);
        selected[cur] = true;
        let c = coords[cur];
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist(&coords[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            let crit = weights.map_or(min_d[i], |w| w[i] * min_d[i]);
            if best.map_or(true, |(_, b)| crit > b) {
                best = Some((i, crit));
            }
        }
        match best {
            Some((i, _)) => cur = i,
            None => break,
        }
    }
    Ok(out)
}

/// Counts neighborhood searches: one per query center.
#[derive(Debug, Default)]
pub struct QueryCounter(Cell<u64>);

impl QueryCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.get()
    }

    pub fn add(&self, n: u64) {
        self.0.set(self.0.get() + n);
    }

    pub fn reset(&self) {
        self.0.set(0);
    }
}

/// Neighbors of one query center.
///
/// `members` holds the first `k` in-radius point indices in ascending order,
/// padded to `k` by repeating the first member; `found` counts the real ones.
/// A center with nothing in range has no members at all.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGroup {
    pub center: Coord,
    pub members: Vec<usize>,
    pub found: usize,
    pub padded: bool,
}

impl NeighborGroup {
    pub fn unique_members(&self) -> &[usize] {
        &self.members[..self.found]
    }
}

/// Uniform hash grid over a fixed point set.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    coords: Vec<Coord>,
    cell: f64,
    grid: BTreeMap<[i64; 3], Vec<usize>>,
}

impl SpatialIndex {
    pub fn new(coords: &[Coord], cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(invalid("grid cell size must be positive"));
        }
        let mut grid: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in coords.iter().enumerate() {
            grid.entry(cell_of(p, cell)).or_default().push(i);
        }
        Ok(Self {
            coords: coords.to_vec(),
            cell,
            grid,
        })
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn query(&self, center: Coord, radius: f64, k: usize, counter: &QueryCounter) -> NeighborGroup {
        counter.add(1);
        let reach = (radius / self.cell).ceil() as i64;
        let c = cell_of(&center, self.cell);
        let mut hits = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        hits.extend(ids.iter().copied().filter(|&i| dist(&self.coords[i], &center) <= radius));
                    }
                }
            }
        }
        hits.sort_unstable();
        hits.truncate(k);
        make_group(center, hits, k)
    }
}

fn cell_of(p: &Coord, cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

fn make_group(center: Coord, mut members: Vec<usize>, k: usize) -> NeighborGroup {
    let found = members.len();
    let padded = found < k;
    if padded && found > 0 {
        let first = members[0];
        members.resize(k, first);
    }
    NeighborGroup {
        center,
        members,
        found,
        padded,
    }
}

/// Ball query for every center against `coords`.
pub fn ball_query(
    centers: &[Coord],
    coords: &[Coord],
    radius: f64,
    k: usize,
    counter: &QueryCounter,
) -> Result<Vec<NeighborGroup>> {
    let index = SpatialIndex::new(coords, radius.max(1e-6))?;
    ball_query_indexed(centers, &index, radius, k, counter)
}

pub fn ball_query_indexed(
    centers: &[Coord],
    index: &SpatialIndex,
    radius: f64,
    k: usize,
    counter: &QueryCounter,
) -> Result<Vec<NeighborGroup>> {
    if !(radius > 0.0) || k == 0 {
        return Err(invalid(alloc::format!("ball query needs radius > 0 and k >= 1, got {radius}, {k}")));
    }
    Ok(centers.iter().map(|&c| index.query(c, radius, k, counter)).collect())
}

/// PointNet set aggregation: a shared MLP over `[member - center, feature]`
/// rows followed by a max over each group. Returns one row per group.
///
/// Padding repeats a member already in the group, so only the distinct
/// members are evaluated; the max is unchanged. An empty group pools a single
/// zero row.
pub fn aggregate_groups(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    groups: &[NeighborGroup],
    coords: &[Coord],
    features: Option<Var>,
) -> Result<Var> {
    let mut rel = Vec::new();
    let mut gather = Vec::new();
    let mut offsets = Vec::with_capacity(groups.len() + 1);
    offsets.push(0);
    for grp in groups {
        if grp.found == 0 {
            rel.extend_from_slice(&[0.0; 3]);
            gather.push(None);
        } else {
            for &i in grp.unique_members() {
                let p = coords[i];
                rel.extend_from_slice(&[p[0] - grp.center[0], p[1] - grp.center[1], p[2] - grp.center[2]]);
                gather.push(Some(i));
            }
        }
        offsets.push(gather.len());
    }
    let rows = gather.len();
    let rel = g.constant(Tensor::matrix(rows, 3, rel)?);
    let input = match features {
        Some(f) => {
            let f = g.gather_rows(f, gather)?;
            g.concat(&[rel, f])?
        }
        None => rel,
    };
    let h = mlp.forward(g, store, input)?;
    g.segment_max(h, &offsets)
}

/// Multi-scale grouping: one ball query per scale and center, aggregated with
/// the scale's MLP, concatenated across scales.
pub fn aggregate_msg(
    g: &mut Graph,
    store: &ParamStore,
    centers: &[Coord],
    coords: &[Coord],
    features: Option<Var>,
    radii: &[f64],
    ks: &[usize],
    mlps: &[Mlp],
    counter: &QueryCounter,
) -> Result<Var> {
    if radii.len() != ks.len() || radii.len() != mlps.len() || radii.is_empty() {
        return Err(invalid("multi-scale grouping needs equally many radii, ks and mlps"));
    }
    let mut parts = Vec::with_capacity(radii.len());
    for ((&r, &k), mlp) in radii.iter().zip(ks).zip(mlps) {
        let groups = ball_query(centers, coords, r, k, counter)?;
        parts.push(aggregate_groups(g, store, mlp, &groups, coords, features)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random_coords(rng: &mut SeededRng, n: usize, extent: f64) -> Vec<Coord> {
        (0..n)
            .map(|_| [rng.range(0.0, extent), rng.range(0.0, extent), rng.range(0.0, extent / 4.0)])
            .collect()
    }

    /// From-scratch greedy selection: min distance to the selected set is
    /// recomputed for every candidate at every step.
    pub(crate) fn brute_weighted_fps(coords: &[Coord], w: Option<&[f64]>, m: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < m {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..coords.len() {
                if sel.contains(&i) {
                    continue;
                }
                let d = sel.iter().map(|&s| dist(&coords[i], &coords[s])).fold(f64::INFINITY, f64::min);
                let c = w.map_or(d, |w| w[i] * d);
                if best.map_or(true, |(_, b)| c > b) {
                    best = Some((i, c));
                }
            }
            sel.push(best.unwrap().0);
        }
        sel
    }

    #[test]
    fn fps_examples() {
        let line: Vec<Coord> = (0..=10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(fps(&line, 3, 0).unwrap(), vec![0, 10, 5]);
        assert_eq!(fps(&line, 1, 4).unwrap(), vec![4]);
        let all = fps(&line, 11, 0).unwrap();
        assert_eq!(all, brute_weighted_fps(&line, None, 11, 0));
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..11).collect::<Vec<_>>());
        assert!(fps(&line, 12, 0).is_err());
        assert!(fps(&line, 0, 0).is_err());
    }

    #[test]
    fn fps_matches_oracle() {
        let mut rng = SeededRng::new(1);
        for t in 0..10 {
            let n = 20 + rng.index(200);
            let pts = random_coords(&mut rng, n, 10.0);
            let m = 1 + rng.index(n);
            assert_eq!(fps(&pts, m, t % n).unwrap(), brute_weighted_fps(&pts, None, m, t % n));
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let w: Vec<f64> = scores.iter().map(|s| s.powf(1.5)).collect();
            assert_eq!(sfps(&pts, &scores, m, 1.5, 0).unwrap(), brute_weighted_fps(&pts, Some(&w), m, 0));
        }
    }

    #[test]
    fn sfps_examples() {
        let mut rng = SeededRng::new(2);
        let pts = random_coords(&mut rng, 100, 5.0);
        let scores: Vec<f64> = (0..100).map(|_| rng.uniform()).collect();
        assert_eq!(sfps(&pts, &scores, 30, 0.0, 0).unwrap(), fps(&pts, 30, 0).unwrap());
        assert_eq!(sfps(&pts, &[0.4; 100], 30, 1.0, 0).unwrap(), fps(&pts, 30, 0).unwrap());

        let mut two = Vec::new();
        let mut s = Vec::new();
        for i in 0..10 {
            two.push([i as f64 * 0.1, 0.0, 0.0]);
            s.push(1.0);
        }
        for i in 0..10 {
            two.push([100.0 + i as f64 * 0.1, 0.0, 0.0]);
            s.push(0.0);
        }
        let sel = sfps(&two, &s, 4, 1.0, 0).unwrap();
        assert!(sel[1..].iter().all(|&i| i < 10), "{sel:?}");
    }

    fn brute_ball(center: Coord, coords: &[Coord], r: f64, k: usize) -> Vec<usize> {
        (0..coords.len()).filter(|&i| dist(&coords[i], &center) <= r).take(k).collect()
    }

    #[test]
    fn ball_query_matches_scan() {
        let mut rng = SeededRng::new(4);
        let pts = random_coords(&mut rng, 400, 6.0);
        let centers: Vec<Coord> = random_coords(&mut rng, 100, 6.0);
        let counter = QueryCounter::new();
        let groups = ball_query(&centers, &pts, 0.9, 12, &counter).unwrap();
        assert_eq!(counter.get(), 100);
        for (c, grp) in centers.iter().zip(&groups) {
            let expect = brute_ball(*c, &pts, 0.9, 12);
            assert_eq!(grp.unique_members(), &expect[..]);
            assert_eq!(grp.padded, expect.len() < 12);
            if grp.found > 0 {
                assert_eq!(grp.members.len(), 12);
                assert!(grp.members[grp.found..].iter().all(|&m| m == expect[0]));
            }
        }
    }

    #[test]
    fn ball_query_edge_cases() {
        let pts: Vec<Coord> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = QueryCounter::new();
        let groups = ball_query(&pts, &pts, 0.5, 4, &c).unwrap();
        for (i, grp) in groups.iter().enumerate() {
            assert_eq!(grp.unique_members(), &[i]);
            assert!(grp.padded);
        }
        let all = ball_query(&[[2.0, 0.0, 0.0]], &pts, 100.0, 10, &c).unwrap();
        assert_eq!(all[0].unique_members(), &[0, 1, 2, 3, 4]);
        let none = ball_query(&[[50.0, 0.0, 0.0]], &pts, 1.0, 4, &c).unwrap();
        assert!(none[0].members.is_empty() && none[0].padded);
        assert!(ball_query(&pts, &pts, 0.0, 4, &c).is_err());
    }

    fn mlp(store: &mut ParamStore, fan_in: usize, widths: &[usize], seed: u64) -> Mlp {
        let name = alloc::format!("m{seed}");
        Mlp::new(store, &name, fan_in, widths, true, &mut SeededRng::new(seed)).unwrap()
    }

    fn group_of(center: Coord, members: Vec<usize>, k: usize) -> NeighborGroup {
        make_group(center, members, k)
    }

    fn eval_group(grp: &NeighborGroup, coords: &[Coord], feats: &Tensor) -> Vec<f64> {
        let mut store = ParamStore::new();
        let m = mlp(&mut store, 3 + feats.cols(), &[8, 6], 9);
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let out = aggregate_groups(&mut g, &store, &m, core::slice::from_ref(grp), coords, Some(f)).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn aggregation_symmetries() {
        let mut rng = SeededRng::new(8);
        let coords = random_coords(&mut rng, 6, 2.0);
        let feats = Tensor::matrix(6, 2, (0..12).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let c = [1.0, 1.0, 0.2];
        let base = eval_group(&group_of(c, vec![0, 1, 2, 3, 4, 5], 6), &coords, &feats);
        let perm = eval_group(&group_of(c, vec![3, 5, 0, 2, 1, 4], 6), &coords, &feats);
        assert_eq!(base, perm);
        let dup = eval_group(&group_of(c, vec![0, 1, 2, 3, 4, 5, 2], 7), &coords, &feats);
        assert_eq!(base, dup);
        let padded = eval_group(&group_of(c, vec![0, 1, 2, 3, 4, 5], 10), &coords, &feats);
        assert_eq!(base, padded);
        let shifted: Vec<Coord> = coords.iter().map(|p| [p[0] + 3.0, p[1] - 7.0, p[2] + 0.5]).collect();
        let moved = eval_group(
            &group_of([4.0, -6.0, 0.7], vec![0, 1, 2, 3, 4, 5], 6),
            &shifted,
            &feats,
        );
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_member_is_plain_mlp() {
        let coords = [[1.0, 2.0, 3.0]];
        let feats = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let got = eval_group(&group_of([0.0, 0.0, 0.0], vec![0], 1), &coords, &feats);
        let mut store = ParamStore::new();
        let m = mlp(&mut store, 5, &[8, 6], 9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![1.0, 2.0, 3.0, 0.5, -0.5]));
        let y = m.forward(&mut g, &store, x).unwrap();
        assert_eq!(got, g.value(y).data());
    }

    #[test]
    fn msg_counts_and_widths() {
        let mut rng = SeededRng::new(3);
        let coords = random_coords(&mut rng, 50, 3.0);
        let mut store = ParamStore::new();
        let mlps = vec![mlp(&mut store, 3, &[4, 5], 1), mlp(&mut store, 3, &[4, 7], 2), mlp(&mut store, 3, &[3], 3)];
        let counter = QueryCounter::new();
        let mut g = Graph::new();
        let out = aggregate_msg(&mut g, &store, &coords[..1], &coords, None, &[0.3, 0.6, 1.2], &[4, 4, 8], &mlps, &counter)
            .unwrap();
        assert_eq!(counter.get(), 3);
        assert_eq!(g.shape(out), &[1, 15]);

        let single = aggregate_msg(&mut g, &store, &coords[..4], &coords, None, &[0.6], &[4], &mlps[1..2], &counter).unwrap();
        let groups = ball_query(&coords[..4], &coords, 0.6, 4, &counter).unwrap();
        let direct = aggregate_groups(&mut g, &store, &mlps[1], &groups, &coords, None).unwrap();
        assert_eq!(g.value(single), g.value(direct));
    }

    proptest! {
        #[test]
        fn ball_query_order_independent(seed in 0u64..1000) {
            let mut rng = SeededRng::new(seed);
            let pts = random_coords(&mut rng, 60, 3.0);
            let mut perm: Vec<usize> = (0..60).collect();
            rng.shuffle(&mut perm);
            let shuffled: Vec<Coord> = perm.iter().map(|&i| pts[i]).collect();
            let c = QueryCounter::new();
            let center = [[1.5, 1.5, 0.4]];
            let a = ball_query(&center, &pts, 1.0, 100, &c).unwrap();
            let b = ball_query(&center, &shuffled, 1.0, 100, &c).unwrap();
            let mut sa: Vec<usize> = a[0].unique_members().to_vec();
            let mut sb: Vec<usize> = b[0].unique_members().iter().map(|&j| perm[j]).collect();
            sa.sort();
            sb.sort();
            prop_assert_eq!(sa, sb);
        }
    }
}
