mod common;

use p2mx::loss::{allocate_samples, chamfer, chamfer_brute};
use p2mx::mdn::deformation_reasoning;
use p2mx::mesh::{hypothesis_fan, icosahedron, parse_obj, write_obj};
use p2mx::metrics::{f_score, f_score_brute};
use p2mx::pooling::{cross_view_stats, STD_EPS};
use p2mx::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = [f64; 3]> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

fn cloud(max: usize) -> impl Strategy<Value = Vec<[f64; 3]>> {
    prop::collection::vec(point(), 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, logits in prop::collection::vec(-30.0f64..30.0, 43)) {
        let data: Vec<f64> = (0..rows).flat_map(|r| logits.iter().map(move |v| v - r as f64)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([rows, 43], data).unwrap());
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(43) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn displacement_stays_inside_the_fan(vertex in 0usize..42, raw in prop::collection::vec(0.0f64..1.0, 43)) {
        let mesh = icosahedron(1).unwrap();
        let fan = hypothesis_fan(&mesh, vertex, 0.02).unwrap();
        let total: f64 = raw.iter().sum::<f64>() + 1e-9;
        let mut scores: Vec<f64> = raw.iter().map(|v| v / total).collect();
        scores[0] += 1.0 - scores.iter().sum::<f64>();
        let v = deformation_reasoning(&fan, &scores).unwrap();
        let c = mesh.vertices()[vertex];
        let d = ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt();
        prop_assert!(d <= 0.02 * (1.0 + 1e-12));
    }

    #[test]
    fn view_statistics_ignore_view_order(
        feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..6),
        mask in prop::collection::vec(any::<bool>(), 6),
        seed in any::<u64>(),
    ) {
        let k = feats.len();
        let valid: Vec<bool> = (0..k).map(|i| mask[i]).collect();
        let a = cross_view_stats(&feats, &valid).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        let mut s = seed;
        for i in (1..k).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let f2: Vec<Vec<f64>> = order.iter().map(|&i| feats[i].clone()).collect();
        let v2: Vec<bool> = order.iter().map(|&i| valid[i]).collect();
        let b = cross_view_stats(&f2, &v2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_one_view_never_lowers_the_max(
        feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..5),
        which in 0usize..5,
        bump in 0.0f64..3.0,
    ) {
        let k = feats.len();
        let which = which % k;
        let valid = vec![true; k];
        let c = feats[0].len();
        let before = cross_view_stats(&feats, &valid).unwrap();
        let mut raised = feats.clone();
        raised[which].iter_mut().for_each(|v| *v += bump);
        let after = cross_view_stats(&raised, &valid).unwrap();
        for j in 0..c {
            prop_assert!(after[c + j] >= before[c + j]);
            prop_assert!(after[j] >= before[j] - 1e-12);
        }
        prop_assert!(after[2 * c..].iter().all(|&s| s >= STD_EPS.sqrt() * (1.0 - 1e-9)));
    }

    #[test]
    fn sample_allocation_is_exact_and_proportional(
        areas in prop::collection::vec(0.0f64..2.0, 1..30),
        n in 0usize..5000,
    ) {
        let total: f64 = areas.iter().sum();
        prop_assume!(total > 1e-6);
        let counts = allocate_samples(&areas, n).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (a, c) in areas.iter().zip(&counts) {
            prop_assert!((*c as f64 - a / total * n as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn chamfer_is_symmetric_and_matches_brute_force(a in cloud(40), b in cloud(40)) {
        let ab = chamfer(&a, &b).unwrap();
        prop_assert!((ab - chamfer(&b, &a).unwrap()).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!((ab - chamfer_brute(&a, &b).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn fscore_matches_brute_force(a in cloud(40), b in cloud(40), tau in 1e-3f64..0.5) {
        let fast = f_score(&a, &b, tau).unwrap();
        let slow = f_score_brute(&a, &b, tau).unwrap();
        prop_assert!((fast.f_tau - slow.f_tau).abs() < 1e-12);
        prop_assert!((fast.f_2tau - slow.f_2tau).abs() < 1e-12);
        prop_assert!(fast.f_tau <= fast.f_2tau + 1e-12);
    }

    #[test]
    fn obj_text_round_trips(jitter in prop::collection::vec(point(), 12)) {
        let base = icosahedron(0).unwrap();
        let verts: Vec<[f64; 3]> = base.vertices().iter().zip(&jitter).map(|(v, j)| [v[0] + 0.1 * j[0], v[1] + 0.1 * j[1], v[2] + 0.1 * j[2]]).collect();
        let mesh = base.with_vertices(verts).unwrap();
        let text = write_obj(&mesh);
        let back = parse_obj(&text, "mem").unwrap();
        prop_assert_eq!(back.faces(), mesh.faces());
        for (a, b) in back.vertices().iter().zip(mesh.vertices()) {
            prop_assert!((0..3).all(|k| (a[k] - b[k]).abs() < 1e-6));
        }
        prop_assert_eq!(write_obj(&back), text);
    }

    #[test]
    fn checkpoints_round_trip(values in prop::collection::vec(-1e3f32..1e3, 1..50)) {
        let mut params = ParamStore::new();
        params.insert("a/w", Tensor::from_vec(values.iter().map(|&v| v as f64).collect()));
        params.insert("b", Tensor::scalar(values[0] as f64));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.get("a/w").unwrap(), params.get("a/w").unwrap());
        prop_assert_eq!(back.get("b").unwrap(), params.get("b").unwrap());
    }
}

#[test]
fn refinement_is_deterministic() {
    use p2mx::mdn::{init_params, mdn_refine, RefineConfig};
    let cfg = common::micro_config();
    let params = init_params(&cfg, 9).unwrap();
    let views = common::micro_views(3, cfg.backbone_channels, 1);
    let mesh = common::scaled_icosahedron(1, 0.4);
    let a = mdn_refine(&mesh, &views, &params, &RefineConfig::default()).unwrap();
    let b = mdn_refine(&mesh, &views, &params, &RefineConfig::default()).unwrap();
    assert_eq!(a, b);
}
