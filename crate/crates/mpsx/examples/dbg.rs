use mpsx::block_structure::{classify_diagonal, triangularize};
use mpsx::canonical_basis::{build_structured_basis, BasisMode};
use mpsx::matrix_sets::MatrixSet;
use mpsx::numerics::{cr, eye, CMat};
use mpsx::Config;
use ndarray::s;

fn main() {
    let cfg = Config::default();
    let a0 = eye(2);
    let mut a1 = CMat::zeros((2, 2));
    a1[(0, 1)] = cr(1.0);
    let a2 = a1.clone();
    let b0 = eye(3);
    let mut b1 = CMat::zeros((3, 3));
    b1[(0, 1)] = cr(1.0);
    let mut b2 = CMat::zeros((3, 3));
    b2[(1, 2)] = cr(1.0);
    let mut mats = Vec::new();
    for (a, b) in [(a0, b0), (a1, b1), (a2, b2)] {
        let mut m = CMat::zeros((5, 5));
        m.slice_mut(s![..2, ..2]).assign(&a);
        m.slice_mut(s![2.., 2..]).assign(&b);
        mats.push(m);
    }
    let set = MatrixSet::new(mats).unwrap();
    let (part0, tri) = triangularize(&set, &cfg).unwrap();
    println!("sizes {:?}", part0.sizes);
    println!("gauge:\n{:.3}", part0.gauge);
    for m in &tri.mats {
        println!("tri:\n{:.3}", m);
    }
    let (part, aligned) = classify_diagonal(&tri, &part0, &cfg).unwrap();
    println!("classes {:?}", part.classes);
    let (sb, _) = build_structured_basis(&aligned, &part, BasisMode::Algebra, &cfg).unwrap();
    for (e, l) in sb.labels.iter().enumerate() {
        println!("label {e}: {:?} first {:?} k {:?}", l.kind, l.first_block, sb.k[e]);
    }
}
