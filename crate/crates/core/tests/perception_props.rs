use gear_core::gaze::MeanGaze;
use gear_core::perception::{align_object, gaze_match, resolve_target, BBox, DetectionFrame, Viewpoint};
use proptest::prelude::*;

fn gaze(x: f64, y: f64) -> MeanGaze {
    MeanGaze { x_mean: x, y_mean: y, n: 15, span_us: 700_000, timestamp_us: 0 }
}

/// The inclusive point-in-box test written out term by term.
fn inside_box(x: f64, y: f64, b: &BBox) -> bool {
    let inside_x = b.x_min <= x && x <= b.x_max;
    let inside_y = b.y_min <= y && y <= b.y_max;
    inside_x && inside_y
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..1800.0f64, 0.0..1000.0f64, 1.0..300.0f64, 1.0..300.0f64, prop::sample::select(vec!["a", "b", "c", "d"]))
        .prop_map(|(x, y, w, h, l)| BBox::new(l, x, y, x + w, y + h, 1.0).unwrap())
}

/// Gaze points biased towards the box edges, where the inequalities flip.
fn point_near(b: &BBox) -> impl Strategy<Value = (f64, f64)> {
    let xs = vec![b.x_min, b.x_max, b.x_min - 1e-9, b.x_max + 1e-9, (b.x_min + b.x_max) / 2.0];
    let ys = vec![b.y_min, b.y_max, b.y_min - 1e-9, b.y_max + 1e-9, (b.y_min + b.y_max) / 2.0];
    prop_oneof![
        (prop::sample::select(xs), prop::sample::select(ys)),
        (0.0..1920.0f64, 0.0..1080.0f64),
    ]
}

fn frame(boxes: Vec<BBox>) -> DetectionFrame {
    DetectionFrame { source: Viewpoint::User, timestamp_us: 0, boxes, frame_width: 1920.0, frame_height: 1080.0 }
}

/// A box b wins when no other matching box beats it on (area, distance, label).
fn brute_force(x: f64, y: f64, boxes: &[BBox]) -> Option<usize> {
    let matching: Vec<usize> = (0..boxes.len()).filter(|&i| inside_box(x, y, &boxes[i])).collect();
    let beats = |i: usize, j: usize| {
        let (a, b) = (&boxes[i], &boxes[j]);
        let area = |b: &BBox| (b.x_max - b.x_min) * (b.y_max - b.y_min);
        let dist = |b: &BBox| (x - (b.x_min + b.x_max) / 2.0).hypot(y - (b.y_min + b.y_max) / 2.0);
        if area(a) != area(b) {
            return area(a) < area(b);
        }
        if dist(a) != dist(b) {
            return dist(a) < dist(b);
        }
        a.label < b.label
    };
    matching.iter().copied().find(|&i| matching.iter().all(|&j| i == j || !beats(j, i)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn gaze_match_is_inclusive_containment((b, (x, y)) in bbox().prop_flat_map(|b| { let p = point_near(&b); (Just(b), p) })) {
        prop_assert_eq!(gaze_match(&gaze(x, y), &b), inside_box(x, y, &b));
    }

    #[test]
    fn resolve_target_matches_brute_force(
        boxes in prop::collection::vec(bbox(), 0..8),
        nest in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 0..4),
        (x, y) in (0.0..1920.0f64, 0.0..1080.0f64),
    ) {
        // add boxes nested inside the first one to force overlaps
        let mut boxes = boxes;
        if let Some(outer) = boxes.first().cloned() {
            for (i, (fx, fy)) in nest.iter().enumerate() {
                let w = (outer.x_max - outer.x_min) * (0.2 + 0.7 * fx);
                let h = (outer.y_max - outer.y_min) * (0.2 + 0.7 * fy);
                boxes.push(BBox::new(format!("n{i}"), outer.x_min, outer.y_min, outer.x_min + w, outer.y_min + h, 1.0).unwrap());
            }
        }
        let f = frame(boxes.clone());
        let got = resolve_target(&gaze(x, y), &f).map(|b| b as *const BBox);
        let want = brute_force(x, y, &boxes).map(|i| &f.boxes[i] as *const BBox);
        prop_assert_eq!(got, want);
        if let Some(b) = resolve_target(&gaze(x, y), &f) {
            prop_assert!(gaze_match(&gaze(x, y), b));
        }
    }

    #[test]
    fn translation_invariance(
        boxes in prop::collection::vec(bbox(), 1..6),
        (x, y) in (0.0..1920.0f64, 0.0..1080.0f64),
        (dx, dy) in (-64i32..64, -64i32..64),
    ) {
        // integer offsets keep every coordinate exact
        let (dx, dy) = (dx as f64, dy as f64);
        let snap = |b: &BBox| BBox::new(b.label.clone(), b.x_min.round(), b.y_min.round(), b.x_max.round() + 1.0, b.y_max.round() + 1.0, 1.0).unwrap();
        let boxes: Vec<BBox> = boxes.iter().map(snap).collect();
        let (x, y) = (x.round(), y.round());
        let moved: Vec<BBox> = boxes.iter().map(|b| b.translated(dx, dy)).collect();
        for (a, b) in boxes.iter().zip(&moved) {
            prop_assert_eq!(gaze_match(&gaze(x, y), a), gaze_match(&gaze(x + dx, y + dy), b));
        }
        let (f0, f1) = (frame(boxes), frame(moved));
        let i0 = resolve_target(&gaze(x, y), &f0).map(|b| f0.boxes.iter().position(|c| std::ptr::eq(c, b)));
        let i1 = resolve_target(&gaze(x + dx, y + dy), &f1).map(|b| f1.boxes.iter().position(|c| std::ptr::eq(c, b)));
        prop_assert_eq!(i0, i1);
    }

    #[test]
    fn align_object_keeps_label(boxes in prop::collection::vec(bbox(), 0..8), want in prop::sample::select(vec!["a", "b", "z"])) {
        let f = DetectionFrame { source: Viewpoint::Robot, ..frame(boxes) };
        match align_object(&f, want) {
            Some(b) => prop_assert_eq!(b.label.as_str(), want),
            None => prop_assert!(f.boxes.iter().all(|b| b.label != want)),
        }
    }
}
