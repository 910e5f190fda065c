use std::collections::HashMap;

use ecl_core::diff::{check_gradient, Tape};
use ecl_core::losses::PrototypeSource;
use ecl_core::model::{ModelParams, NetConfig, ParamGroup};
use ecl_core::verify::{self, ModelInstance};
use ecl_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn net(seed: u64) -> NetConfig {
    NetConfig {
        input_dim: 3,
        feature_dim: 5,
        proj_hidden: 7,
        num_classes: 4,
        extractor_hidden: vec![6],
        seed,
    }
}

fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn group_errors(inst: &ModelInstance) -> HashMap<ParamGroup, (f64, f64)> {
    let tensors = inst.tensors();
    let r = check_gradient(|tape, v| inst.total(tape, v), &tensors, verify::GRAD_EPS).unwrap();
    let mut out: HashMap<ParamGroup, (f64, f64)> = HashMap::new();
    for (k, (group, _)) in inst.params.tensors().into_iter().enumerate() {
        let (a, n) = (&r.analytic[k], &r.numeric[k]);
        let err = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
            .fold(0.0, f64::max);
        let mag = a.frobenius_norm();
        let e = out.entry(group).or_insert((0.0, 0.0));
        e.0 = e.0.max(err);
        e.1 += mag;
    }
    out
}

#[test]
fn end_to_end_gradient_every_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for source in [
        PrototypeSource::LinearTransform,
        PrototypeSource::NonlinearMlp,
    ] {
        for _ in 0..5 {
            let inst = ModelInstance::random(&mut rng, source).unwrap();
            let errs = group_errors(&inst);
            let mut expected = vec![
                ParamGroup::Extractor,
                ParamGroup::Projector,
                ParamGroup::ClassifierWeight,
                ParamGroup::ClassifierBias,
                ParamGroup::Transform,
            ];
            if source == PrototypeSource::NonlinearMlp {
                expected.push(ParamGroup::PrototypeMlp);
            }
            for g in expected {
                let (err, mag) = errs[&g];
                assert!(err <= verify::GRAD_TOL, "{source:?} {g:?}: {err:e}");
                // The transform only shapes the linear prototypes.
                let inert =
                    g == ParamGroup::Transform && source != PrototypeSource::LinearTransform;
                assert_eq!(mag == 0.0, inert, "{source:?} {g:?} gradient norm {mag}");
            }
        }
    }
}

#[test]
fn linear_prototypes_match_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for seed in 0..20 {
        let mut p = ModelParams::init(&net(seed), PrototypeSource::LinearTransform).unwrap();
        p.t = verify::gaussian(&mut rng, 5, 5);
        let tape = Tape::new();
        let pv = p.on_tape(&tape);
        let got = pv
            .prototypes(PrototypeSource::LinearTransform, None)
            .unwrap()
            .matrix()
            .value();
        let want = matmul_oracle(&p.t, &p.w.transpose());
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn nonlinear_prototypes_match_oracle() {
    let p = ModelParams::init(&net(8), PrototypeSource::NonlinearMlp).unwrap();
    let [m0, m1] = p.proto_mlp.clone().unwrap();
    let hidden = matmul_oracle(&m0, &p.w.transpose()).map(|v| v.max(0.0));
    let want = matmul_oracle(&m1, &hidden);
    let tape = Tape::new();
    let got = p
        .on_tape(&tape)
        .prototypes(PrototypeSource::NonlinearMlp, None)
        .unwrap();
    assert!(got.matrix().value().max_abs_diff(&want) <= 1e-12);

    let linear_only = ModelParams::init(&net(8), PrototypeSource::LinearTransform).unwrap();
    let tape = Tape::new();
    let err = linear_only
        .on_tape(&tape)
        .prototypes(PrototypeSource::NonlinearMlp, None);
    assert!(matches!(err, Err(Error::Unavailable(_))));
}

#[test]
fn class_means_need_every_class() {
    let p = ModelParams::init(&net(1), PrototypeSource::ClassMeans).unwrap();
    let tape = Tape::new();
    let z = tape.constant(verify::unit_rows(&mut ChaCha8Rng::seed_from_u64(0), 6, 5));
    let labels = [0, 1, 2, 0, 1, 2];
    let err = p
        .on_tape(&tape)
        .prototypes(PrototypeSource::ClassMeans, Some((z, &labels)))
        .unwrap_err();
    assert!(
        matches!(&err, Error::Unavailable(m) if m.contains("class 3")),
        "{err}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projector_rows_are_unit(seed in any::<u64>(), n in 1usize..20) {
        let p = ModelParams::init(&net(seed), PrototypeSource::LinearTransform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = verify::gaussian(&mut rng, n, 3);
        let f = p.features(&x).unwrap();
        match p.representations(&f) {
            Ok(z) => {
                for r in 0..n {
                    let norm = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    prop_assert!((norm - 1.0).abs() <= 1e-9);
                }
            }
            Err(Error::Domain { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn forward_matches_layer_oracle(seed in any::<u64>()) {
        let p = ModelParams::init(&net(seed), PrototypeSource::LinearTransform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = verify::gaussian(&mut rng, 4, 3);
        let mut h = x.clone();
        for layer in &p.extractor {
            let mut a = matmul_oracle(&h, &layer.weight.transpose());
            for r in 0..a.rows() {
                for k in 0..a.cols() {
                    a.set(r, k, (a.get(r, k) + layer.bias.get(0, k)).max(0.0));
                }
            }
            h = a;
        }
        let f = p.features(&x).unwrap();
        prop_assert!(f.max_abs_diff(&h) <= 1e-12);
        let mut logits = matmul_oracle(&h, &p.w.transpose());
        for r in 0..4 {
            for k in 0..4 {
                logits.set(r, k, logits.get(r, k) + p.b.get(0, k));
            }
        }
        prop_assert!(p.logits(&f).unwrap().max_abs_diff(&logits) <= 1e-12);
    }

    #[test]
    fn init_is_reproducible(seed in any::<u64>()) {
        let a = ModelParams::init(&net(seed), PrototypeSource::NonlinearMlp).unwrap();
        let b = ModelParams::init(&net(seed), PrototypeSource::NonlinearMlp).unwrap();
        prop_assert_eq!(a, b);
    }
}
