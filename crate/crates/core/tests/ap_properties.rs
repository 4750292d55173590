//! AP@50 invariances over random detection problems.

use hallucidet_core::metrics::average_precision_at_50;
use hallucidet_core::{BBox, Detection, DetectionSet};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (1u32..3, 0.0..40.0f64, 0.0..40.0f64, 2.0..20.0f64, 2.0..20.0f64)
        .prop_map(|(c, x, y, w, h)| BBox::new(c, x, y, w, h).unwrap())
}

/// Ground truth plus detections that are jittered copies of it or noise.
fn problem() -> impl Strategy<Value = (Vec<DetectionSet>, Vec<Vec<BBox>>)> {
    prop::collection::vec(
        (prop::collection::vec(bbox(), 1..4), prop::collection::vec((bbox(), 0.01..1.0f64, any::<bool>(), -2.0..2.0f64), 0..6)),
        1..5,
    )
    .prop_map(|imgs| {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for (g, raw) in imgs {
            let d: DetectionSet = raw
                .into_iter()
                .enumerate()
                .map(|(i, (noise, score, copy, dx))| {
                    let bbox = if copy {
                        let t = g[i % g.len()];
                        BBox::new(t.cls, t.x + dx, t.y - dx, t.w, t.h).unwrap()
                    } else {
                        noise
                    };
                    Detection { bbox, score }
                })
                .collect();
            dets.push(d);
            gts.push(g);
        }
        (dets, gts)
    })
}

proptest! {
    #[test]
    fn ap_lies_in_unit_interval((dets, gts) in problem()) {
        let ap = average_precision_at_50(&dets, &gts).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn monotone_score_transform_preserves_ap((dets, gts) in problem()) {
        let squashed: Vec<DetectionSet> = dets
            .iter()
            .map(|d| d.iter().map(|x| Detection { score: x.score.powi(3) * 0.5, ..*x }).collect())
            .collect();
        prop_assert_eq!(
            average_precision_at_50(&dets, &gts).unwrap(),
            average_precision_at_50(&squashed, &gts).unwrap()
        );
    }

    #[test]
    fn image_order_is_irrelevant((dets, gts) in problem()) {
        let (mut rd, mut rg) = (dets.clone(), gts.clone());
        rd.reverse();
        rg.reverse();
        let a = average_precision_at_50(&dets, &gts).unwrap();
        let b = average_precision_at_50(&rd, &rg).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn trailing_false_positive_never_helps((dets, gts) in problem()) {
        let before = average_precision_at_50(&dets, &gts).unwrap();
        let mut more = dets.clone();
        // Far outside every ground-truth box, below every existing score.
        more[0].push(Detection { bbox: BBox::new(1, 500.0, 500.0, 5.0, 5.0).unwrap(), score: 1e-6 });
        prop_assert!(average_precision_at_50(&more, &gts).unwrap() <= before + 1e-12);
    }

    #[test]
    fn ground_truth_as_detections_is_perfect(gts in prop::collection::vec(prop::collection::vec(bbox(), 1..4), 1..5)) {
        let dets: Vec<DetectionSet> = gts
            .iter()
            .map(|g| g.iter().enumerate().map(|(i, b)| Detection { bbox: *b, score: 1.0 - i as f64 * 0.1 }).collect())
            .collect();
        prop_assert_eq!(average_precision_at_50(&dets, &gts).unwrap(), 1.0);
    }
}

#[test]
fn no_ground_truth_is_an_error() {
    assert!(average_precision_at_50(&[vec![]], &[vec![]]).is_err());
    assert!(average_precision_at_50(&[], &[vec![]]).is_err());
}
