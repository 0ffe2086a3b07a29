use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use raf_core::bank::{ExpressionBank, FeatureRecord};
use raf_core::coverage::{
    b2t_distance, build_mixed_set, kde_kl, median_bandwidth, rbf_mmd, CoverageError, KdeBandwidth, PcaModel, SampleSet,
};
use raf_core::retrieval::Index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(r: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> SampleSet {
    SampleSet::from_rows((0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0) + shift).collect()).collect()).unwrap()
}

fn to_matrix(s: &SampleSet) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), s.dim(), |i, j| s.rows()[i][j])
}

fn oracle_mmd(x: &SampleSet, y: &SampleSet, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean = |a: &SampleSet, b: &SampleSet| {
        let mut s = 0.0;
        for u in a.rows() {
            for v in b.rows() {
                s += k(u, v);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    (mean(x, x) + mean(y, y) - 2.0 * mean(x, y)).max(0.0).sqrt()
}

/// PCA of `data` via nalgebra's SVD of the centered matrix: (mean, top-k
/// components as rows, their variances with denominator n − 1).
fn oracle_pca(data: &DMatrix<f64>, k: usize) -> (DVector<f64>, DMatrix<f64>, Vec<f64>) {
    let n = data.nrows();
    let mean = data.row_mean().transpose();
    let centered = DMatrix::from_fn(n, data.ncols(), |i, j| data[(i, j)] - mean[j]);
    let svd = centered.svd(false, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let vt = svd.v_t.unwrap();
    let comps = DMatrix::from_fn(k, data.ncols(), |i, j| vt[(order[i], j)]);
    let vars = order[..k].iter().map(|&i| svd.singular_values[i].powi(2) / (n - 1) as f64).collect();
    (mean, comps, vars)
}

fn oracle_kde_kl(p: &SampleSet, q: &SampleSet, dims: usize) -> f64 {
    let union = to_matrix(&SampleSet::from_rows(p.rows().iter().chain(q.rows()).cloned().collect()).unwrap());
    let (mean, comps, _) = oracle_pca(&union, dims);
    let project = |s: &SampleSet| -> Vec<DVector<f64>> {
        s.rows().iter().map(|r| &comps * (DVector::from_column_slice(r) - &mean)).collect()
    };
    let (pp, qq) = (project(p), project(q));
    let density = |data: &[DVector<f64>], x: &DVector<f64>| -> f64 {
        let n = data.len() as f64;
        let d = dims as f64;
        let mu = data.iter().fold(DVector::zeros(dims), |a, v| a + v) / n;
        let mut cov = DMatrix::zeros(dims, dims);
        for v in data {
            let c = v - &mu;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        let h2 = n.powf(-2.0 / (d + 4.0));
        let kcov = cov * h2;
        let inv = kcov.clone().try_inverse().unwrap();
        let norm = ((2.0 * std::f64::consts::PI).powf(d) * kcov.determinant()).sqrt();
        data.iter()
            .map(|v| {
                let dx = x - v;
                (-0.5 * (dx.transpose() * &inv * &dx)[(0, 0)]).exp() / norm
            })
            .sum::<f64>()
            / n
    };
    pp.iter().map(|x| (density(&pp, x) / density(&qq, x)).ln()).sum::<f64>() / pp.len() as f64
}

#[test]
fn mmd_matches_direct_double_sum() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let x = random_set(&mut r, 15 + trial, 4, 0.0);
        let y = random_set(&mut r, 10, 4, 0.3);
        let sigma = 0.5 + trial as f64 * 0.1;
        let got = rbf_mmd(&x, &y, sigma).unwrap();
        let want = oracle_mmd(&x, &y, sigma);
        assert!((got - want).abs() <= 1e-10 * want.max(1e-3), "{got} vs {want}");
    }
}

#[test]
fn median_bandwidth_matches_sorted_median() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for n in [2, 3, 4, 7, 12, 25] {
        let s = random_set(&mut r, n, 3, 0.0);
        let mut d = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let v: f64 = s.rows()[i].iter().zip(&s.rows()[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                d.push(v);
            }
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let want = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        assert_eq!(median_bandwidth(&s).unwrap(), want);
    }
}

#[test]
fn median_bandwidth_ignores_duplicates_and_rejects_degenerate() {
    let s = SampleSet::from_rows(vec![vec![0.0], vec![0.0], vec![3.0]]).unwrap();
    assert_eq!(median_bandwidth(&s).unwrap(), 3.0);
    let same = SampleSet::from_rows(vec![vec![1.0], vec![1.0]]).unwrap();
    assert!(matches!(median_bandwidth(&same), Err(CoverageError::DegenerateSet)));
}

#[test]
fn pca_matches_svd_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    // anisotropic data so the spectrum is well separated
    let scales = [3.0, 2.0, 1.0, 0.5, 0.1];
    let rows: Vec<Vec<f64>> =
        (0..200).map(|_| scales.iter().map(|s| s * r.random_range(-1.0..1.0)).collect()).collect();
    let mixed: Vec<Vec<f64>> =
        rows.iter().map(|v| vec![v[0] + 0.3 * v[1], v[1] - 0.2 * v[2], v[2] + v[3], v[3], v[4] + 0.1 * v[0]]).collect();
    let set = SampleSet::from_rows(mixed).unwrap();
    let model = PcaModel::fit(&set, 3).unwrap();
    let (mean, comps, vars) = oracle_pca(&to_matrix(&set), 3);
    for j in 0..5 {
        assert!((model.mean[j] - mean[j]).abs() < 1e-12);
    }
    for k in 0..3 {
        assert!((model.explained_variance[k] - vars[k]).abs() < 1e-9 * vars[0], "{k}");
        let dot: f64 = (0..5).map(|j| model.components[k][j] * comps[(k, j)]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "component {k}: |dot| = {}", dot.abs());
        // sign rule: largest-magnitude coordinate is positive
        let c = &model.components[k];
        let big = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        assert!(big > 0.0);
    }
}

#[test]
fn kde_kl_matches_matrix_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(13);
    for (shift, dims) in [(0.0, 2), (0.4, 3), (1.0, 2), (0.2, 4)] {
        let p = random_set(&mut r, 40, 6, 0.0);
        let q = random_set(&mut r, 50, 6, shift);
        let got = kde_kl(&p, &q, dims, KdeBandwidth::Scott).unwrap();
        let want = oracle_kde_kl(&p, &q, dims);
        assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "shift {shift}: {got} vs {want}");
    }
}

#[test]
fn kde_kl_grows_with_separation() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let p = random_set(&mut r, 60, 3, 0.0);
    let near = random_set(&mut r, 60, 3, 0.2);
    let far = random_set(&mut r, 60, 3, 1.5);
    let a = kde_kl(&p, &near, 3, KdeBandwidth::Scott).unwrap();
    let b = kde_kl(&p, &far, 3, KdeBandwidth::Scott).unwrap();
    assert!(b > a, "{a} {b}");
}

fn arb_set(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = SampleSet> {
    proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, d), n)
        .prop_map(|rows| SampleSet::from_rows(rows).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_symmetric_nonnegative_and_zero_on_self(x in arb_set(1..12, 3), y in arb_set(1..12, 3), sigma in 0.1f64..5.0) {
        let a = rbf_mmd(&x, &y, sigma).unwrap();
        let b = rbf_mmd(&y, &x, sigma).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a >= 0.0);
        prop_assert!(rbf_mmd(&x, &x, sigma).unwrap() <= 1e-9);
    }

    #[test]
    fn b2t_zero_on_subset_and_bounded_by_any_pairing(x in arb_set(1..15, 2), y in arb_set(1..15, 2)) {
        prop_assert_eq!(b2t_distance(&x, &x).unwrap(), 0.0);
        let d = b2t_distance(&x, &y).unwrap();
        // distance to the first train sample is an upper bound of the min
        let bound: f64 = x.rows().iter().map(|t| t.iter().zip(&y.rows()[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / x.len() as f64;
        prop_assert!(d <= bound + 1e-12);
        // adding train samples never increases B2T
        let bigger = SampleSet::from_rows(y.rows().iter().chain(x.rows()).cloned().collect()).unwrap();
        prop_assert!(b2t_distance(&x, &bigger).unwrap() <= d);
    }

    #[test]
    fn kde_kl_self_is_zero(x in arb_set(6..20, 3)) {
        prop_assert!(kde_kl(&x, &x, 2, KdeBandwidth::Scott).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn mixed_set_replaces_exact_fraction(n in 2usize..30, fraction in 0.0f64..=1.0, seed in any::<u64>()) {
        let recs = (0..40).map(|i| FeatureRecord::new(format!("b{}", i % 4), format!("{i}"), vec![i as f64 * 0.1, (i as f64).sin()]));
        let index = Index::build(&ExpressionBank::ingest_records(recs, 2).unwrap()).unwrap();
        let train = SampleSet::from_rows((0..n).map(|i| vec![i as f64 * 0.13, 0.5]).collect()).unwrap();
        let ids = vec!["subject".to_string(); n];
        let mixed = build_mixed_set(&train, &ids, &index, fraction, seed).unwrap();
        prop_assert_eq!(mixed.retrieved_count(), (fraction * n as f64).round() as usize);
        for (i, s) in mixed.substitutions.iter().enumerate() {
            match s {
                None => prop_assert_eq!(&mixed.samples.rows()[i], &train.rows()[i]),
                Some(nb) => prop_assert_eq!(mixed.samples.rows()[i].as_slice(), index.feature(nb.entry_index).as_slice()),
            }
        }
        prop_assert_eq!(mixed, build_mixed_set(&train, &ids, &index, fraction, seed).unwrap());
    }
}
