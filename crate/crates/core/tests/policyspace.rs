use adaptsearch::encoder::argmax;
use adaptsearch::policyspace::{class_means, cosine_scores, init_candidate_params, negative_l2_scores, InitContext, PolicyCandidate, PolicyKind};
use adaptsearch::rng;
use gradtape::{Tensor, Var};
use rand::Rng as _;

#[test]
fn one_shot_prototypes_are_the_support_embeddings() {
    let emb = Tensor::matrix(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]]).unwrap();
    let labels = [2, 0, 1];
    let v = Var::constant(emb.clone());
    let di = init_candidate_params(&PolicyCandidate::fixed(PolicyKind::PlDi).unwrap(), InitContext {
        support: Some((&v, &labels, 3)),
        ..Default::default()
    })
    .unwrap();
    let w = di.params[0].value();
    for (s, &c) in labels.iter().enumerate() {
        assert_eq!(w.select_rows(&[c]).unwrap(), emb.select_rows(&[s]).unwrap());
    }
}

#[test]
fn two_shot_mean() {
    let emb = Var::constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    assert_eq!(class_means(&emb, &[0, 0], 1).unwrap().value().data(), &[0.5, 0.5]);
}

#[test]
fn cosine_of_a_row_with_itself_is_tau() {
    let w = Tensor::matrix(&[vec![1.0, 2.0, -1.0], vec![-2.0, 1.0, 0.0]]).unwrap();
    let s = cosine_scores(&w, &Tensor::vector(&[1.0, 2.0, -1.0]), 10.0).unwrap();
    assert!((s.data()[0] - 10.0).abs() < 1e-12);
    assert!(s.data()[1].abs() < 1e-12);
}

#[test]
fn negative_l2_argmax_is_the_nearest_prototype() {
    let mut r = rng::stream(0, "nn", 0);
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
        let v: Vec<f64> = (0..4).map(|_| r.random_range(-3.0..3.0)).collect();
        let dist: Vec<f64> = rows.iter().map(|w| -w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).collect();
        let s = negative_l2_scores(&Tensor::matrix(&rows).unwrap(), &Tensor::vector(&v)).unwrap();
        assert_eq!(argmax(s.data()), argmax(&dist));
    }
}
