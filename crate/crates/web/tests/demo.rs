use servoclone::geometry::Vec3;
use servoclone::world::World;
use servoclone_web::{camera_pose, Demo};

#[test]
fn view_over_the_goal_centers_the_cup() {
    let demo = Demo::new(0);
    let n = demo.image_size();
    let px = demo.camera_view(0.0, 0.0, 0.0, 0.0, 0.0);
    assert_eq!(px.len(), n * n * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    // the cup top fills the image center
    let mid = (n / 2 * n + n / 2) * 4;
    assert!(px[mid] > 150 && px[mid + 1] < 80, "{:?}", &px[mid..mid + 4]);
    // tilt is applied about the camera's own axis
    let world = World::default();
    let pose = camera_pose(&world, Vec3::ZERO, 0.0, 0.0);
    assert!((pose.position - world.hover_point()).norm() < 1e-12);
}

#[test]
fn safety_slice_is_calm_inside_and_hot_outside() {
    let demo = Demo::new(0);
    let px = demo.safety_slice(0.0, 2.0, 21);
    assert_eq!(px.len(), 21 * 21 * 4);
    let at = |row: usize, col: usize| &px[(row * 21 + col) * 4..(row * 21 + col) * 4 + 4];
    assert_eq!(at(10, 10), [24, 40, 72, 255]);
    assert_eq!(at(0, 0)[0], 230);
}

#[test]
fn expert_rollouts_reach_the_goal() {
    let mut demo = Demo::new(3);
    for far in [false, true] {
        let r = demo.rollout(far).unwrap();
        assert!(r.success());
        assert!(r.time_to_goal() <= 60.0);
        let p = r.positions();
        assert_eq!(p.len() % 3, 0);
        let last = Vec3::new(p[p.len() - 3], p[p.len() - 2], p[p.len() - 1]);
        assert!(last.norm() < 0.06);
    }
}
