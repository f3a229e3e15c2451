//! K-modes pre-clustering and the hierarchical starting values for EM.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::error::{MlcaError, Result};
use crate::model::{Dataset, MeasurementParams, ModelDims, ModelParams, StructuralParams};
use crate::step1::{self, EmControl, Step1Fit};

pub const KMODES_RESTARTS: usize = 5;
pub const KMODES_MAX_ITER: usize = 50;

/// Floor for the cross-tabulated class proportions.
const PI_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KModesResult {
    /// Cluster label per row, `0..k`.
    pub assignment: Vec<usize>,
    /// `k x H` binary modes.
    pub modes: Array2<u8>,
    /// Total Hamming distance of rows to their modes.
    pub cost: u64,
    /// Cost after each sweep of the best restart, starting with the initial assignment.
    pub cost_trace: Vec<u64>,
    pub n_iter: usize,
}

/// Rows packed 64 items per word so distances are popcounts.
struct Packed {
    words: usize,
    bits: Vec<u64>,
}

impl Packed {
    fn new(y: ArrayView2<u8>) -> Self {
        let words = y.ncols().div_ceil(64).max(1);
        let mut bits = vec![0u64; y.nrows() * words];
        for (i, row) in y.outer_iter().enumerate() {
            for (h, &v) in row.iter().enumerate() {
                if v != 0 {
                    bits[i * words + h / 64] |= 1 << (h % 64);
                }
            }
        }
        Packed { words, bits }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    fn n_rows(&self) -> usize {
        self.bits.len() / self.words
    }
}

fn hamming(a: &[u64], b: &[u64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as u64).sum()
}

fn assign(packed: &Packed, modes: &Packed, out: &mut [usize]) -> u64 {
    let k = modes.n_rows();
    let mut cost = 0;
    for (i, slot) in out.iter_mut().enumerate() {
        let row = packed.row(i);
        let mut best = 0;
        let mut best_d = u64::MAX;
        for c in 0..k {
            let d = hamming(row, modes.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *slot = best;
        cost += best_d;
    }
    cost
}

/// Column-wise majority per cluster; ties go to 1, empty clusters keep their mode.
fn update_modes(y: ArrayView2<u8>, assignment: &[usize], modes: &mut Array2<u8>) {
    let (k, h) = modes.dim();
    let mut ones = Array2::<usize>::zeros((k, h));
    let mut sizes = vec![0usize; k];
    for (row, &c) in y.outer_iter().zip(assignment) {
        sizes[c] += 1;
        for (o, &v) in ones.row_mut(c).iter_mut().zip(row.iter()) {
            *o += v as usize;
        }
    }
    for c in 0..k {
        if sizes[c] == 0 {
            continue;
        }
        for j in 0..h {
            modes[[c, j]] = u8::from(2 * ones[[c, j]] >= sizes[c]);
        }
    }
}

/// Lloyd-style K-modes under simple matching, best of `restarts` random starts.
pub fn kmodes(y: ArrayView2<u8>, k: usize, seed: u64, max_iter: usize) -> Result<KModesResult> {
    kmodes_with_restarts(y, k, seed, max_iter, KMODES_RESTARTS)
}

pub fn kmodes_with_restarts(
    y: ArrayView2<u8>,
    k: usize,
    seed: u64,
    max_iter: usize,
    restarts: usize,
) -> Result<KModesResult> {
    if k < 1 {
        return Err(MlcaError::InvalidInput("K-modes needs at least one cluster".into()));
    }
    let n = y.nrows();
    if n == 0 {
        return Err(MlcaError::InvalidInput("K-modes needs at least one row".into()));
    }
    let packed = Packed::new(y);

    // first occurrence of each distinct response pattern
    let mut seen = HashMap::new();
    let mut distinct = Vec::new();
    for i in 0..n {
        if seen.insert(packed.row(i).to_vec(), i).is_none() {
            distinct.push(i);
        }
    }
    if distinct.len() < k {
        log::warn!(
            "K-modes with {k} clusters on {} distinct rows: duplicate modes",
            distinct.len()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KModesResult> = None;
    for _ in 0..restarts.max(1) {
        let seeds: Vec<usize> = if distinct.len() >= k {
            sample(&mut rng, distinct.len(), k).into_iter().map(|s| distinct[s]).collect()
        } else {
            let mut rows = distinct.clone();
            rows.extend(sample(&mut rng, n, k - distinct.len()));
            rows
        };
        let mut modes = y.select(Axis(0), &seeds);
        let mut labels = vec![0usize; n];
        let mut cost = assign(&packed, &Packed::new(modes.view()), &mut labels);
        let mut trace = vec![cost];
        let mut n_iter = 0;
        let mut next = vec![0usize; n];
        while n_iter < max_iter {
            n_iter += 1;
            update_modes(y, &labels, &mut modes);
            cost = assign(&packed, &Packed::new(modes.view()), &mut next);
            trace.push(cost);
            if next == labels {
                break;
            }
            std::mem::swap(&mut labels, &mut next);
        }
        let candidate = KModesResult {
            assignment: labels,
            modes,
            cost,
            cost_trace: trace,
            n_iter,
        };
        if best.as_ref().is_none_or(|b| candidate.cost < b.cost) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Low-level permutation sorting classes by decreasing mean item probability.
/// `perm[new] = old`.
pub fn reorder_permutation(measurement: &MeasurementParams) -> Vec<usize> {
    let means: Vec<f64> = measurement
        .phi()
        .mean_axis(Axis(0))
        .expect("at least one item")
        .to_vec();
    let mut perm: Vec<usize> = (0..means.len()).collect();
    perm.sort_by(|&a, &b| means[b].total_cmp(&means[a]));
    let tied = perm.windows(2).any(|w| (means[w[0]] - means[w[1]]).abs() < 1e-10);
    if tied {
        log::warn!("near-tie in class ordering key; keeping the existing order for tied classes");
    }
    perm
}

/// Sorts low-level classes by decreasing mean of their item probabilities.
pub fn reorder_classes(params: &ModelParams) -> ModelParams {
    let perm = reorder_permutation(&params.measurement);
    let identity: Vec<usize> = (0..params.n_high()).collect();
    params.permuted(&perm, &identity)
}

/// Hierarchical starting values plus the pieces computed along the way.
#[derive(Debug, Clone)]
pub struct HierarchicalInit {
    pub params: ModelParams,
    /// Single-level fit on the pooled data (one high-level class).
    pub pooled: Step1Fit,
    /// Pre-clustered high-level class per group, after sorting.
    pub group_classes: Vec<usize>,
    /// MAP low-level class per row, after reordering.
    pub unit_classes: Vec<usize>,
}

/// Starting values for `(omega, Pi, Phi)` without covariates.
pub fn hierarchical_init(data: &Dataset, dims: &ModelDims, seed: u64) -> Result<ModelParams> {
    let ctrl = EmControl {
        seed,
        n_starts: 0,
        ..EmControl::default()
    };
    Ok(hierarchical_init_detailed(data, dims, &ctrl)?.params)
}

pub fn hierarchical_init_detailed(
    data: &Dataset,
    dims: &ModelDims,
    ctrl: &EmControl,
) -> Result<HierarchicalInit> {
    let pooled = pooled_fit(data, dims.n_low, ctrl)?;
    hierarchical_init_from_pooled(data, dims, ctrl, pooled)
}

/// Single-level `T`-class fit on the pooled rows, started from K-modes clusters.
/// Classes are in fitted order; the hierarchical start reorders them.
pub fn pooled_fit(data: &Dataset, t_count: usize, ctrl: &EmControl) -> Result<Step1Fit> {
    let dims = data.dims(t_count, 1)?;
    let y = data.y();
    let km_low = kmodes(y, t_count, ctrl.seed ^ 0x4b4d_0002, KMODES_MAX_ITER)?;
    let mut sizes = vec![0usize; t_count];
    let mut ones = Array2::<f64>::zeros((dims.n_items, t_count));
    for (row, &c) in y.outer_iter().zip(&km_low.assignment) {
        sizes[c] += 1;
        for (h, &v) in row.iter().enumerate() {
            ones[[h, c]] += v as f64;
        }
    }
    let phi0 = Array2::from_shape_fn(ones.dim(), |(h, t)| (ones[[h, t]] + 1.0) / (sizes[t] as f64 + 2.0));
    let n = data.n_units() as f64;
    let mut pi0: Vec<f64> = sizes.iter().map(|&s| (s as f64 + 1.0) / (n + t_count as f64)).collect();
    crate::numeric::normalize_simplex(&mut pi0);
    let pooled_start = ModelParams::new(
        MeasurementParams::new(phi0)?,
        StructuralParams::unconditional(
            Array1::from_elem(1, 1.0),
            Array2::from_shape_vec((1, t_count), pi0).expect("shape"),
        )?,
    )?;
    let pooled_ctrl = EmControl {
        n_starts: 0,
        ..ctrl.clone()
    };
    step1::fit_unconditional(data, &dims, &pooled_start, &pooled_ctrl)
}

/// [`hierarchical_init_detailed`] with the pooled fit supplied, so that fits
/// sharing `T` can reuse it.
pub fn hierarchical_init_from_pooled(
    data: &Dataset,
    dims: &ModelDims,
    ctrl: &EmControl,
    pooled: Step1Fit,
) -> Result<HierarchicalInit> {
    let (t_count, m_count) = (dims.n_low, dims.n_high);
    if pooled.params.n_low() != t_count || pooled.params.n_high() != 1 {
        return Err(MlcaError::DimensionMismatch(format!(
            "pooled fit has {} low-level classes, expected {t_count}",
            pooled.params.n_low()
        )));
    }
    let n_groups = data.n_groups();
    let y = data.y();

    // high level: modal K-modes cluster per group
    let km_high = kmodes(y, m_count, ctrl.seed ^ 0x4b4d_0001, KMODES_MAX_ITER)?;
    let mut group_classes = vec![0usize; n_groups];
    for (j, slot) in group_classes.iter_mut().enumerate() {
        let mut counts = vec![0usize; m_count];
        for i in data.group_range(j) {
            counts[km_high.assignment[i]] += 1;
        }
        // lowest index wins ties
        *slot = (0..m_count).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap();
    }
    let mut freq = vec![0usize; m_count];
    for &c in &group_classes {
        freq[c] += 1;
    }
    let mut high_order: Vec<usize> = (0..m_count).collect();
    high_order.sort_by(|&a, &b| freq[b].cmp(&freq[a]));
    let mut rank = vec![0usize; m_count];
    for (new, &old) in high_order.iter().enumerate() {
        rank[old] = new;
    }
    group_classes.iter_mut().for_each(|c| *c = rank[*c]);
    let omega = if freq.contains(&0) {
        log::warn!("empty high-level class after pre-clustering; using uniform weights");
        Array1::from_elem(m_count, 1.0 / m_count as f64)
    } else {
        Array1::from_iter(high_order.iter().map(|&c| freq[c] as f64 / n_groups as f64))
    };

    let perm = reorder_permutation(&pooled.params.measurement);
    let mut inverse = vec![0usize; t_count];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let phi = pooled.params.measurement.permuted(&perm);
    let unit_classes: Vec<usize> = pooled
        .posteriors
        .q
        .outer_iter()
        .map(|qi| {
            let col = qi.column(0);
            let best = (0..t_count)
                .max_by(|&a, &b| col[a].total_cmp(&col[b]).then(b.cmp(&a)))
                .unwrap();
            inverse[best]
        })
        .collect();

    // cross-tabulate MAP low-level classes against pre-clustered group classes
    let mut table = Array2::<f64>::zeros((m_count, t_count));
    let group_of = data.group_of_row();
    for (i, &x) in unit_classes.iter().enumerate() {
        table[[group_classes[group_of[i]], x]] += 1.0;
    }
    let marginal = table.sum_axis(Axis(0));
    let mut pi = Array2::zeros((m_count, t_count));
    for m in 0..m_count {
        let row_total: f64 = table.row(m).sum();
        let source = if row_total > 0.0 { table.row(m).to_owned() } else { marginal.clone() };
        let total = source.sum();
        let mut row: Vec<f64> = source.iter().map(|c| (c / total).max(PI_FLOOR)).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
        pi.row_mut(m).assign(&Array1::from(row));
    }

    let params = ModelParams::new(phi, StructuralParams::unconditional(omega, pi)?)?;
    Ok(HierarchicalInit {
        params,
        pooled,
        group_classes,
        unit_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior;
    use ndarray::array;

    fn brute_force_two_partition_cost(y: ArrayView2<u8>) -> u64 {
        let n = y.nrows();
        let mut best = u64::MAX;
        for mask in 1u32..(1 << n) - 1 {
            let mut cost = 0;
            for side in [true, false] {
                let rows: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1 == 1) == side).collect();
                for h in 0..y.ncols() {
                    let ones = rows.iter().filter(|&&i| y[[i, h]] == 1).count() as u64;
                    cost += ones.min(rows.len() as u64 - ones);
                }
            }
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn separated_blocks_are_recovered() {
        let y = array![[1u8, 1, 1, 0], [1, 1, 1, 0], [1, 1, 0, 0], [0, 0, 0, 1], [0, 0, 0, 1], [0, 0, 1, 1]];
        let r = kmodes(y.view(), 2, 3, 50).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[0], r.assignment[2]);
        assert_eq!(r.assignment[3], r.assignment[4]);
        assert_ne!(r.assignment[0], r.assignment[3]);
        assert_eq!(r.cost, 2);
    }

    #[test]
    fn single_cluster_takes_majority_with_ties_to_one() {
        let y = array![[1u8, 0, 1], [1, 0, 0], [0, 1, 0], [1, 1, 1]];
        let r = kmodes(y.view(), 1, 0, 50).unwrap();
        assert_eq!(r.modes.row(0).to_vec(), vec![1, 1, 1]);
        assert!(r.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn matches_exhaustive_two_partition_search() {
        let cases = [
            array![[1u8, 0, 1, 1], [1, 1, 1, 0], [0, 0, 1, 0], [0, 1, 0, 0], [1, 0, 0, 1], [0, 1, 1, 1]],
            array![[1u8, 1, 0, 0, 1], [1, 1, 0, 1, 1], [0, 0, 1, 1, 0], [0, 0, 1, 0, 0], [1, 0, 1, 0, 1], [0, 1, 0, 1, 0]],
        ];
        for y in cases {
            let r = kmodes_with_restarts(y.view(), 2, 11, 50, 50).unwrap();
            assert_eq!(r.cost, brute_force_two_partition_cost(y.view()));
        }
    }

    #[test]
    fn cost_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let y = Array2::from_shape_fn((200, 9), |_| u8::from(rng.random_bool(0.4)));
        let r = kmodes(y.view(), 4, 1, 50).unwrap();
        assert!(r.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.n_iter <= 50);
    }

    #[test]
    fn zero_clusters_is_an_error() {
        let y = array![[1u8]];
        assert!(kmodes(y.view(), 0, 0, 10).is_err());
    }

    #[test]
    fn reorder_examples() {
        let meas = MeasurementParams::new(array![[0.3, 0.9, 0.5], [0.3, 0.9, 0.5]]).unwrap();
        assert_eq!(reorder_permutation(&meas), vec![1, 2, 0]);
        let sorted = MeasurementParams::new(array![[0.9, 0.5, 0.1]]).unwrap();
        assert_eq!(reorder_permutation(&sorted), vec![0, 1, 2]);
        let same = MeasurementParams::new(array![[0.4, 0.4, 0.4]]).unwrap();
        assert_eq!(reorder_permutation(&same), vec![0, 1, 2]);
    }

    #[test]
    fn reorder_keeps_loglik() {
        let y = array![[1u8, 0], [1, 1], [0, 0], [0, 1], [1, 1], [0, 0]];
        let data = Dataset::without_covariates(y, &[0, 0, 1, 1, 2, 2]).unwrap();
        let params = ModelParams::new(
            MeasurementParams::new(array![[0.2, 0.8, 0.6], [0.3, 0.7, 0.1]]).unwrap(),
            StructuralParams::unconditional(
                array![0.4, 0.6],
                array![[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]],
            )
            .unwrap(),
        )
        .unwrap();
        let re = reorder_classes(&params);
        let a = posterior::loglik(&data, &params).unwrap();
        let b = posterior::loglik(&data, &re).unwrap();
        assert!((a - b).abs() < 1e-10);
        let means = re.measurement.phi().mean_axis(Axis(0)).unwrap();
        assert!(means[0] >= means[1] && means[1] >= means[2]);
    }

    #[test]
    fn trivial_single_class_init_gives_item_means() {
        let y = array![[1u8, 0], [1, 1], [0, 0], [1, 1]];
        let data = Dataset::without_covariates(y, &[0, 0, 1, 1]).unwrap();
        let dims = data.dims(1, 1).unwrap();
        let p = hierarchical_init(&data, &dims, 0).unwrap();
        assert!((p.measurement.phi()[[0, 0]] - 0.75).abs() < 1e-6);
        assert!((p.measurement.phi()[[1, 0]] - 0.5).abs() < 1e-6);
        assert_eq!(p.structural.omega().to_vec(), vec![1.0]);
    }
}
