use std::collections::BTreeSet;

use proptest::prelude::*;
use vpl_core::adaptation::{layout, AdaptationPlan, Hyper, Method};
use vpl_core::backbone::{param_count, Backbone, BackboneConfig, Pooling};
use vpl_core::datahub::{
    audit_split, ood_sweep_specs, patient_split, DatasetManifest, ManifestEntry, Modality, SplitSpec,
};
use vpl_core::gmoe::{gmoe_fuse, moe_fuse, GateParam, GateVector};
use vpl_core::numcore::rng::seeded;
use vpl_core::numcore::{Graph, Tensor};
use vpl_core::trainlab::{auroc, total_params_multiplier};

fn brute_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn features(rows: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1e3f64..1e3, rows * d).prop_map(move |v| Tensor::new(vec![rows, d], v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor, Vec<f64>)> {
    (1usize..4, 1usize..=64)
        .prop_flat_map(|(rows, d)| (features(rows, d), features(rows, d), prop::collection::vec(-2.0f64..2.0, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..40)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(v));
        let s = g.softmax(x).unwrap();
        let sum: f64 = g.value(s).data().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(s).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn param_count_equals_instantiated_sum(
        grid in 1usize..4, patch in 1usize..4, ch in 1usize..3, heads in 1usize..3,
        head_dim in 1usize..5, depth in 0usize..3, ratio in 1usize..4, k in 1usize..5,
    ) {
        let cfg = BackboneConfig {
            image_size: grid * patch, patch_size: patch, in_channels: ch, dim: heads * head_dim, depth, heads,
            mlp_ratio: ratio, num_classes: k, pool: Pooling::Cls, ln_eps: 1e-6,
        };
        let b = Backbone::init(cfg.clone(), "general", &mut seeded(0)).unwrap();
        let instantiated: usize = b.params.iter().map(|p| p.value.len()).sum();
        prop_assert_eq!(param_count(&cfg), instantiated);
    }

    #[test]
    fn gate_endpoints_are_exact((ag, am, _) in pair()) {
        let d = ag.last_dim();
        prop_assert_eq!(gmoe_fuse(&ag, &am, &GateVector::constant(d, 1.0, GateParam::Raw)).unwrap(), ag.clone());
        prop_assert_eq!(gmoe_fuse(&ag, &am, &GateVector::constant(d, 0.0, GateParam::Raw)).unwrap(), am);
    }

    #[test]
    fn gate_fixed_point((ag, _, alpha) in pair()) {
        let gate = GateVector { raw: Tensor::vector(alpha), param: GateParam::Raw };
        prop_assert_eq!(gmoe_fuse(&ag, &ag, &gate).unwrap(), ag);
    }

    #[test]
    fn half_gate_is_half_sum((ag, am, _) in pair()) {
        let half = gmoe_fuse(&ag, &am, &GateVector::constant(ag.last_dim(), 0.5, GateParam::Raw)).unwrap();
        let sum = moe_fuse(&ag, &am).unwrap();
        let halved: Vec<f64> = sum.data().iter().map(|v| 0.5 * v).collect();
        prop_assert_eq!(half.data(), halved.as_slice());
    }

    #[test]
    fn moe_commutes((ag, am, _) in pair()) {
        prop_assert_eq!(moe_fuse(&ag, &am).unwrap(), moe_fuse(&am, &ag).unwrap());
    }

    #[test]
    fn sigmoid_gates_stay_open(raw in prop::collection::vec(-30.0f64..30.0, 1..64)) {
        let g = GateVector { raw: Tensor::vector(raw), param: GateParam::Sigmoid };
        prop_assert!(g.effective().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn auroc_equals_pair_counting(
        data in prop::collection::vec((0u8..6, any::<bool>()), 2..200)
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        let has_both = labels.iter().any(|&l| l) && labels.iter().any(|&l| !l);
        match auroc(&scores, &labels) {
            Ok(a) => {
                prop_assert!(has_both);
                prop_assert!((a - brute_auroc(&scores, &labels)).abs() <= 1e-12);
            }
            Err(_) => prop_assert!(!has_both),
        }
    }

    #[test]
    fn multiplier_monotone(base in 1usize..1000, owned in prop::collection::vec(0usize..500, 1..20), extra in 0usize..100) {
        let m = total_params_multiplier(base, &owned, base).unwrap();
        let mut bigger = owned.clone();
        bigger[0] += extra;
        prop_assert!(total_params_multiplier(base, &bigger, base).unwrap() >= m);
        let mut more = owned.clone();
        more.push(extra);
        prop_assert!(total_params_multiplier(base, &more, base).unwrap() >= m);
    }

    #[test]
    fn splits_never_leak(patients in 1usize..60, per in 1usize..4, seen_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let entries = (0..patients * per).map(|i| ManifestEntry {
            sample_ref: format!("s{i}"), label: i % 2, patient_id: format!("p{}", i % patients), modality: Modality::Oct,
        }).collect();
        let m = DatasetManifest::new("m", 2, entries).unwrap();
        let seen = (seen_frac * patients as f64) as usize;
        let unseen = (patients - seen) / 2;
        let spec = SplitSpec::new(seen, unseen, seed);
        let s = patient_split(&m, &spec).unwrap();
        prop_assert!(audit_split(&m, &s).passed);
        let pid = |idx: &[usize]| -> BTreeSet<String> { idx.iter().map(|&i| m.entries[i].patient_id.clone()).collect() };
        let seen_set: BTreeSet<String> = pid(&s.train).union(&pid(&s.test_seen)).cloned().collect();
        prop_assert_eq!(seen_set.len(), seen);
        prop_assert_eq!(pid(&s.test_unseen).len(), unseen);
        prop_assert!(seen_set.is_disjoint(&pid(&s.test_unseen)));
        prop_assert_eq!(&s, &patient_split(&m, &spec).unwrap());
    }

    #[test]
    fn layout_covers_each_id_once(m in 0usize..11, r in 1usize..6, p in 1usize..5) {
        let method = Method::ALL[m];
        let mut hyper = Hyper::default();
        match method {
            Method::Adapter | Method::MoeAdapter | Method::GmoeAdapter => hyper.bottleneck = Some(r),
            Method::VptShallow | Method::VptDeep => hyper.prompt_len = Some(p),
            _ => {}
        }
        let entries = layout(&BackboneConfig::tiny(3), &AdaptationPlan::with_hyper(method, hyper), 3).unwrap();
        let ids: BTreeSet<&str> = entries.iter().map(|e| e.id.as_str()).collect();
        prop_assert_eq!(ids.len(), entries.len());
        prop_assert!(entries.iter().filter(|e| e.id.starts_with("head.")).all(|e| e.trainable));
    }
}

#[test]
fn sweep_specs_fit_a_160_patient_cohort() {
    let entries = (0..320)
        .map(|i| ManifestEntry {
            sample_ref: format!("s{i}"),
            label: i % 2,
            patient_id: format!("p{:03}", i % 160),
            modality: Modality::Color,
        })
        .collect();
    let m = DatasetManifest::new("malaria-like", 2, entries).unwrap();
    for mode in 1..=3 {
        for seed in 0..5 {
            for spec in ood_sweep_specs(mode, seed).unwrap() {
                let s = patient_split(&m, &spec).unwrap();
                assert!(audit_split(&m, &s).passed);
            }
        }
    }
}
