//! Randomized invariant checks over generated tensors, kernels, and
//! datasets.

use cpnn_core::cp::{cp_als, normalize, opnorm_bound_conv, rank_cap, CpMode};
use cpnn_core::fourier::{conv2d_circular, conv_operator_norm_exact, imdft, mdft};
use cpnn_core::network::{forward, margin_loss, LayerSpec, NetworkModel};
use cpnn_core::properties::{layer_spectra, measure_properties, TfVariant};
use cpnn_core::tensor::{ComplexTensor, DenseTensor};
use num_complex::Complex64;
use proptest::prelude::*;

fn vec_f64(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn conv_kernel_strategy() -> impl Strategy<Value = (LayerSpec, usize, usize)> {
    // (layer, h, w) with kernel fitting the grid
    (2usize..4, 2usize..4, 1usize..5, 4usize..7, 4usize..7).prop_flat_map(
        |(s, o, r, h, w)| {
            let k = 9 * r;
            (
                vec_f64(r),
                vec_f64(r * o),
                vec_f64(r * s),
                vec_f64(k),
                Just((s, o, r, h, w)),
            )
                .prop_map(|(ls, bo, as_, cs, (s, o, r, h, w))| {
                    let lambdas: Vec<f64> = ls.iter().map(|x| x.abs() + 1e-3).collect();
                    let chunk = |v: &[f64], n: usize| -> Vec<Vec<f64>> {
                        v.chunks(n).map(|c| c.to_vec()).collect()
                    };
                    let modes = vec![
                        CpMode { dims: vec![o], factors: chunk(&bo, o) },
                        CpMode { dims: vec![s], factors: chunk(&as_, s) },
                        CpMode { dims: vec![3, 3], factors: chunk(&cs, 9) },
                    ];
                    let (kernel, _) = normalize(&lambdas, &modes).unwrap();
                    (LayerSpec::ConvCp { s, o, kx: 3, ky: 3, kernel }, h, w)
                })
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mdft_is_unitary(data in prop::collection::vec(-1.0f64..1.0, 24)) {
        let x = ComplexTensor::from_vec(
            &[4, 6],
            data.iter().map(|&v| Complex64::new(v, -0.5 * v)).collect(),
        ).unwrap();
        let y = mdft(&x, &[0, 1]).unwrap();
        prop_assert!((y.frobenius_norm() - x.frobenius_norm()).abs() <= 1e-10);
        let back = imdft(&y, &[0, 1]).unwrap();
        let diff: f64 = x.data.iter().zip(&back.data)
            .map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        prop_assert!(diff <= 1e-10 * (1.0 + x.frobenius_norm()));
    }

    #[test]
    fn normalize_invariants((layer, _, _) in conv_kernel_strategy()) {
        let k = layer.cp_kernel().unwrap();
        for w in k.lambdas.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
        for l in &k.lambdas {
            prop_assert!(*l >= 0.0);
        }
        for mode in &k.modes {
            for f in &mode.factors {
                let n: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn truncation_error_bounded_by_tail((layer, _, _) in conv_kernel_strategy()) {
        let k = layer.cp_kernel().unwrap();
        let r = k.width();
        let full = k.reconstruct();
        for j in 1..r {
            let t = k.truncate(j).unwrap();
            let diff = full.sub(&t.reconstruct()).unwrap().frobenius_norm();
            let tail: f64 = k.lambdas[j..].iter().sum();
            prop_assert!(diff <= tail * (1.0 + 1e-10) + 1e-12);
        }
    }

    #[test]
    fn conv_opnorm_bound_dominates_exact((layer, h, w) in conv_kernel_strategy()) {
        let k = layer.cp_kernel().unwrap();
        let bound = opnorm_bound_conv(k, 2, h, w).unwrap();
        // true operator norm of the dense kernel
        let (s, o) = match &layer {
            LayerSpec::ConvCp { s, o, .. } => (*s, *o),
            _ => unreachable!(),
        };
        let dense = k.reconstruct();
        let mut m = DenseTensor::zeros(&[3, 3, o, s]);
        for oo in 0..o {
            for ss in 0..s {
                for a in 0..3 {
                    for b in 0..3 {
                        m.set(&[a, b, oo, ss], dense.get(&[oo, ss, a, b]));
                    }
                }
            }
        }
        let exact = conv_operator_norm_exact(&m, h, w).unwrap();
        prop_assert!(exact <= bound * (1.0 + 1e-9));
    }

    #[test]
    fn spectra_monotone_and_variants_ordered((layer, h, w) in conv_kernel_strategy()) {
        let (tf_pf, tf_pc, nb_pf, nb_pc) = layer_spectra(&layer, h, w).unwrap();
        let r = tf_pf.len();
        for j in 1..r {
            prop_assert!(tf_pf[j] >= tf_pf[j - 1] - 1e-12);
            prop_assert!(nb_pf[j] <= nb_pf[j - 1] + 1e-12);
        }
        prop_assert!(nb_pf[r].abs() <= 1e-15);
        prop_assert!(nb_pc[r].abs() <= 1e-15);
        for j in 0..r {
            prop_assert!(tf_pf[j] <= tf_pc[j] + 1e-12);
            prop_assert!(nb_pf[j] <= nb_pc[j] + 1e-12);
        }
    }

    #[test]
    fn conv_output_norm_within_exact_bound(
        (layer, h, w) in conv_kernel_strategy(),
        xdata in prop::collection::vec(-1.0f64..1.0, 512),
    ) {
        let (s, o) = match &layer {
            LayerSpec::ConvCp { s, o, .. } => (*s, *o),
            _ => unreachable!(),
        };
        let n = h * w * s;
        let x = DenseTensor::from_vec(&[h, w, s], xdata[..n].to_vec()).unwrap();
        prop_assume!(x.frobenius_norm() > 1e-9);
        let k = layer.cp_kernel().unwrap();
        let dense = k.reconstruct();
        let mut m = DenseTensor::zeros(&[3, 3, o, s]);
        for oo in 0..o {
            for ss in 0..s {
                for a in 0..3 {
                    for b in 0..3 {
                        m.set(&[a, b, oo, ss], dense.get(&[oo, ss, a, b]));
                    }
                }
            }
        }
        let y = conv2d_circular(&x, &m).unwrap();
        let exact = conv_operator_norm_exact(&m, h, w).unwrap();
        prop_assert!(y.frobenius_norm() <= exact * x.frobenius_norm() * (1.0 + 1e-9));
    }

    #[test]
    fn cp_als_error_is_a_valid_relative_error(
        data in prop::collection::vec(-1.0f64..1.0, 36),
        r in 1usize..4,
    ) {
        let t = DenseTensor::from_vec(&[3, 3, 2, 2], data).unwrap();
        prop_assume!(t.frobenius_norm() > 1e-9);
        let grouping = vec![vec![0], vec![1], vec![2, 3]];
        prop_assume!(r <= rank_cap(&[3, 3, 4]));
        let (k, rel_err) = cp_als(&t, r, &grouping, 1e-10, 300, 0).unwrap();
        prop_assert!(rel_err >= 0.0 && rel_err.is_finite());
        let recon = k.reconstruct();
        let actual = t.sub(&recon).unwrap().frobenius_norm() / t.frobenius_norm();
        prop_assert!((actual - rel_err).abs() <= 1e-6 * (1.0 + rel_err));
    }

    #[test]
    fn margin_loss_is_a_probability_and_monotone(
        seed in 0u64..1000,
        g1 in 0.0f64..0.5,
        g2 in 0.5f64..2.0,
    ) {
        use cpnn_core::harness::{make_synthetic, toy_cnn};
        let model = toy_cnn(2, seed);
        let data = make_synthetic(2, 3, &[8, 8, 1], seed).unwrap();
        let a = margin_loss(&model, &data.samples, g1).unwrap();
        let b = margin_loss(&model, &data.samples, g2).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!(a <= b);
    }

    #[test]
    fn cushions_and_rf_are_well_formed(seed in 0u64..500) {
        use cpnn_core::harness::{make_synthetic, toy_fc};
        let model = toy_fc(2, seed);
        let data = make_synthetic(2, 3, &[16], seed).unwrap();
        let table = measure_properties(&model, &data.samples).unwrap();
        for p in &table.layers {
            prop_assert!(p.lc > 0.0 && p.lc.is_finite());
            let rf = p.rf.unwrap();
            prop_assert!(rf > 0.0 && rf <= 1.0 + 1e-12);
            prop_assert_eq!(p.hw, 1);
        }
        // forward scores stay finite
        let (scores, _) = forward(&model, &data.samples[0].0).unwrap();
        prop_assert!(scores.iter().all(|s| s.is_finite()));
    }
}
