use catpose_demo::{box_iou, depth_view, rotation_errors};

#[test]
fn identical_boxes_overlap_fully() {
    let [exact, mc] = box_iou([0.2, 0.1, 0.3], [0.2, 0.1, 0.3], 0.0, 0.0, 20_000, 1).unwrap();
    assert!((exact - 1.0).abs() < 1e-9);
    assert!((mc - 1.0).abs() < 0.02);
}

#[test]
fn exact_and_sampled_iou_agree() {
    let [exact, mc] = box_iou([0.2, 0.1, 0.3], [0.25, 0.1, 0.2], 30.0, 0.05, 200_000, 2).unwrap();
    assert!(exact > 0.0 && exact < 1.0);
    assert!((exact - mc).abs() < 0.01, "{exact} vs {mc}");
    assert_eq!(box_iou([0.1; 3], [0.1; 3], 0.0, 1.0, 100, 0).unwrap()[0], 0.0);
    assert!(box_iou([0.0, 0.1, 0.1], [0.1; 3], 0.0, 0.0, 100, 0).is_err());
}

#[test]
fn occlusion_hides_pixels() {
    let clear = depth_view("cone", 4, 0).unwrap();
    let half = depth_view("cone", 4, 50).unwrap();
    assert_eq!(clear.depth.len(), clear.width * clear.height);
    assert!(clear.points > half.points && half.points > 0);
    assert!(clear.depth.iter().all(|d| *d >= 0.0));
    assert!(depth_view("torus", 0, 0).is_err());
    assert!(depth_view("box", 0, 30).is_err());
}

#[test]
fn symmetry_removes_spin_about_the_axis() {
    let [plain, sym] = rotation_errors("cylinder", 1, 40.0).unwrap();
    assert!((plain - 40.0).abs() < 1e-6);
    assert!(sym < 1e-6);
    let [plain, sym] = rotation_errors("l_bracket", 1, 40.0).unwrap();
    assert!((plain - 40.0).abs() < 1e-6 && (sym - 40.0).abs() < 1e-6);
}
