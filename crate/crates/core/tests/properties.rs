use proptest::prelude::*;

use ssm_surgeon::ffn_prune::{allocate_sparsity, gram_reconstruction_error, prune_linear_obs, PlanEntry};
use ssm_surgeon::ssm_prune::{ceil_count, select_mask, select_mask_by_score};
use ssm_surgeon::{ImportanceField, Pattern, Tensor};

fn field(l: usize, d: usize, n: usize, vals: &[f64]) -> ImportanceField {
    ImportanceField {
        per_step: Tensor::new("m", &[l, d, n], vals[..l * d * n].to_vec()).unwrap(),
        aggregate_full: None,
    }
}

/// `X Xᵀ` for a random `[k, m]` X, plus a ridge so it is definite.
fn gram(k: usize, x: &[f64]) -> Tensor {
    let m = x.len() / k;
    let mut g = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            g[i * k + j] = (0..m).map(|t| x[i * m + t] * x[j * m + t]).sum::<f64>() + if i == j { 1e-3 } else { 0.0 };
        }
    }
    Tensor::new("g", &[k, k], g).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unstructured_mask_prunes_ceil_count(
        l in 1usize..5, d in 1usize..6, n in 1usize..6, p in 0.0f64..=1.0,
        vals in prop::collection::vec(0.0f64..10.0, 150),
    ) {
        let f = field(l, d, n, &vals);
        let m = select_mask(&f, Pattern::Unstructured, p).unwrap();
        prop_assert_eq!(m.k_pruned, ceil_count(p, d * n));
        prop_assert_eq!(m.mask.count_zeros(), m.k_pruned);
        prop_assert!(m.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn nm_mask_holds_per_group(
        l in 1usize..4, d in 1usize..5, groups in 1usize..3, pick in 0usize..2,
        vals in prop::collection::vec(0.0f64..10.0, 128),
    ) {
        let (zn, zm) = [(2, 4), (4, 8)][pick];
        let n = zm * groups;
        let f = field(l, d, n, &vals.iter().cycle().copied().take(l * d * n).collect::<Vec<_>>());
        let m = select_mask(&f, Pattern::NM { n: zn, m: zm }, 0.5).unwrap();
        for r in 0..d {
            for g in m.mask.row(r).chunks(zm) {
                prop_assert_eq!(g.iter().filter(|&&v| v == 0.0).count(), zn);
            }
        }
    }

    #[test]
    fn column_mask_removes_whole_columns(
        l in 1usize..4, d in 1usize..5, n in 1usize..9, p in 0.0f64..=1.0,
        vals in prop::collection::vec(0.0f64..10.0, 160),
    ) {
        let f = field(l, d, n, &vals);
        let m = select_mask(&f, Pattern::Column, p).unwrap();
        let cols = m.zero_columns();
        prop_assert_eq!(cols.len(), (p * n as f64).floor() as usize);
        prop_assert_eq!(m.mask.count_zeros(), cols.len() * d);
    }

    #[test]
    fn score_mask_keeps_the_largest(
        vals in prop::collection::vec(-5.0f64..5.0, 12), p in 0.0f64..=1.0,
    ) {
        let score = Tensor::new("s", &[3, 4], vals).unwrap();
        let m = select_mask_by_score(&score, p).unwrap();
        let kept_min = score.data().iter().zip(m.mask.data()).filter(|(_, &k)| k == 1.0).map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
        let cut_max = score.data().iter().zip(m.mask.data()).filter(|(_, &k)| k == 0.0).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(cut_max <= kept_min);
    }

    #[test]
    fn allocation_preserves_mean_and_bounds(
        n in 2usize..30, s in 0.05f64..0.95, frac in 0.0f64..=1.0,
    ) {
        let alpha = frac * s.min(1.0 - s);
        let entries: Vec<PlanEntry> = (0..n)
            .map(|i| PlanEntry { module: format!("m{i}"), sensitivity: i as f64, rank: i, sparsity: 0.0 })
            .collect();
        let plan = allocate_sparsity(entries, s, alpha).unwrap();
        let mean = plan.entries.iter().map(|e| e.sparsity).sum::<f64>() / n as f64;
        prop_assert!((mean - s).abs() < 1e-12);
        for e in &plan.entries {
            prop_assert!(e.sparsity >= s - alpha - 1e-12 && e.sparsity <= s + alpha + 1e-12);
            prop_assert!((0.0..=1.0).contains(&e.sparsity));
        }
        // less sensitive modules are pruned harder
        prop_assert!(plan.entries.windows(2).all(|w| w[0].sparsity >= w[1].sparsity));
    }

    #[test]
    fn obs_meets_budget_and_matches_reported_error(
        rows in 1usize..5, k in 2usize..9, s in 0.0f64..=1.0, blocksize in 1usize..6,
        w in prop::collection::vec(-2.0f64..2.0, 40), x in prop::collection::vec(-1.0f64..1.0, 96),
    ) {
        let weight = Tensor::new("w", &[rows, k], w[..rows * k].to_vec()).unwrap();
        let g = gram(k, &x[..k * (96 / k)]);
        let r = prune_linear_obs(&weight, &g, s, blocksize).unwrap();
        let total = ((s * (rows * k) as f64).round() as usize).min(rows * k);
        prop_assert_eq!(r.mask.count_zeros(), total);
        for row in 0..rows {
            for j in 0..k {
                if r.mask.get2(row, j) == 0.0 {
                    prop_assert_eq!(r.weight.get2(row, j), 0.0);
                }
            }
        }
        let budgets: Vec<usize> = (0..rows).map(|i| r.mask.row(i).iter().filter(|&&v| v == 0.0).count()).collect();
        prop_assert!(budgets.iter().max().unwrap() - budgets.iter().min().unwrap() <= 1);
        let err = gram_reconstruction_error(&weight, &r.weight, &g).unwrap();
        prop_assert!((err - r.recon_error).abs() <= 1e-8 * (1.0 + err.abs()));
    }
}
