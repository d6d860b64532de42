use metaisda::datakit::Batch;
use metaisda::metagrad::{ce_batch, meta_gradient_exact, meta_gradient_fd, pseudo_step};
use metaisda::networks::{ClassifierArch, ClassifierParams, CovNetArch, CovNetParams, FreezeMask};
use metaisda::numkit::{dot, Matrix, ParamSet, RngState};

struct Instance {
    classifier: ClassifierParams,
    covnet: CovNetParams,
    train: Batch,
    meta: Batch,
    lambda: f64,
    alpha: f64,
}

fn random_batch(n: usize, dim: usize, classes: usize, rng: &mut RngState) -> Batch {
    let data = (0..n * dim).map(|_| rng.standard_normal()).collect();
    Batch {
        inputs: Matrix::from_vec(n, dim, data).unwrap(),
        labels: (0..n).map(|_| rng.below(classes)).collect(),
    }
}

fn instance(seed: u64) -> Instance {
    let mut rng = RngState::new(seed);
    let input_dim = 2 + rng.below(4);
    let depth = 1 + rng.below(2);
    let block_widths: Vec<usize> = (0..depth).map(|_| 2 + rng.below(4)).collect();
    let num_classes = 2 + rng.below(4);
    let arch = ClassifierArch {
        input_dim,
        block_widths,
        num_classes,
    };
    let mut classifier = ClassifierParams::init(&arch, &mut rng).unwrap();
    // Larger head weights make the shift terms matter.
    classifier
        .head
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|w| *w *= 2.0);
    let covnet =
        CovNetParams::init(&CovNetArch::default_for(arch.feature_dim()), &mut rng).unwrap();
    let train = random_batch(3 + rng.below(4), input_dim, num_classes, &mut rng);
    let meta = random_batch(2 + rng.below(4), input_dim, num_classes, &mut rng);
    Instance {
        classifier,
        covnet,
        train,
        meta,
        lambda: rng.uniform_range(0.5, 5.0),
        alpha: rng.uniform_range(0.1, 1.0),
    }
}

fn composed_meta_loss(inst: &Instance, covnet: &CovNetParams) -> f64 {
    let (pseudo, _) = pseudo_step(
        &inst.classifier,
        covnet,
        &inst.train,
        inst.lambda,
        inst.alpha,
        FreezeMask::none(),
    )
    .unwrap();
    ce_batch(&pseudo, &inst.meta, FreezeMask::none()).unwrap().0
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = dot(a, a).sqrt().max(dot(b, b).sqrt()).max(1e-12);
    diff / scale
}

#[test]
fn exact_matches_end_to_end_differences() {
    for seed in 0..20 {
        let inst = instance(seed);
        let (_, rec) = pseudo_step(
            &inst.classifier,
            &inst.covnet,
            &inst.train,
            inst.lambda,
            inst.alpha,
            FreezeMask::none(),
        )
        .unwrap();
        let exact = meta_gradient_exact(&rec, &inst.covnet, &inst.meta)
            .unwrap()
            .grad
            .flatten();
        let base = inst.covnet.flatten();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..base.len())
            .map(|k| {
                let mut p = base.clone();
                p[k] += h;
                let mut plus = inst.covnet.clone();
                plus.assign_flat(&p).unwrap();
                p[k] -= 2.0 * h;
                let mut minus = inst.covnet.clone();
                minus.assign_flat(&p).unwrap();
                (composed_meta_loss(&inst, &plus) - composed_meta_loss(&inst, &minus)) / (2.0 * h)
            })
            .collect();
        let err = rel_err(&exact, &numeric);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
        let fd = meta_gradient_fd(&rec, &inst.covnet, &inst.meta, 1e-2)
            .unwrap()
            .grad
            .flatten();
        assert!(rel_err(&fd, &exact) <= 1e-3, "seed {seed}");
    }
}
