use ovdkit::evalx::{coco_thresholds, evaluate_ap, EvalOptions};
use ovdkit_bench::{detection_batch, eval_instance, scored_boxes};

#[test]
fn fixtures_are_seeded_and_valid() {
    assert_eq!(scored_boxes(3, 50), scored_boxes(3, 50));
    let (boxes, scores) = scored_boxes(3, 50);
    assert!(boxes.iter().all(|b| b[2] > b[0] && b[3] > b[1]));
    assert!(scores.iter().all(|s| (0.0..1.0).contains(s)));
    for t in detection_batch(2, 6) {
        t.validate().unwrap();
        assert_eq!(t.concepts.len(), 6);
    }
    let (p, g) = eval_instance(1, 4, 3);
    let r = evaluate_ap(&p, &g, &coco_thresholds(), &EvalOptions::default()).unwrap();
    assert!((0.0..=1.0).contains(&r.ap_overall));
}
