mod common;

use common::*;
use geomoment::render::{
    backward_from_trace, render, render_backward, render_reference, render_with_trace, RenderSettings, RgbImage,
    BACKGROUND_DEPTH,
};
use geomoment::scene::{CameraPose, Gaussian3D, GaussianScene, ReferenceAsset};
use nalgebra::Vector3;

fn cam(size: usize, dist: f64) -> CameraPose {
    CameraPose::orbit(0.0, 0.0, dist, intrinsics(size)).unwrap()
}

#[test]
fn empty_scene_is_background() {
    let c = cam(16, 3.0);
    let img = render(&GaussianScene::empty(), &c, [0.2, 0.4, 0.6], &RenderSettings::default()).unwrap();
    for px in img.rgb.data.chunks(3) {
        assert_eq!(px, [0.2, 0.4, 0.6]);
    }
    assert!(img.alpha.iter().all(|&a| a == 0.0));
    assert!(img.depth.iter().all(|&d| d == BACKGROUND_DEPTH));
}

#[test]
fn single_gaussian_center_pixel_closed_form() {
    // Odd width puts a pixel center exactly on the optical axis.
    let c = cam(33, 4.0);
    let color = Vector3::new(0.9, 0.3, 0.1);
    let bg = [0.2, 0.5, 1.0];
    let scene = GaussianScene::new(vec![Gaussian3D::isotropic(Vector3::zeros(), 0.1, 0.8, color)]);
    let img = render(&scene, &c, bg, &RenderSettings::default()).unwrap();
    let px = img.rgb.pixel(16, 16);
    for k in 0..3 {
        let want = 0.8 * color[k] + 0.2 * bg[k];
        assert!((px[k] - want).abs() < 1e-12, "channel {k}: {} vs {want}", px[k]);
    }
    assert!((img.depth[16 * 33 + 16] - 4.0).abs() < 1e-12);
}

#[test]
fn two_layer_front_to_back_expansion() {
    let c = cam(33, 4.0);
    let c1 = Vector3::new(1.0, 0.0, 0.0);
    let c2 = Vector3::new(0.0, 1.0, 0.0);
    let bg = [0.0, 0.0, 1.0];
    // Camera at +x: the Gaussian at larger x is in front.
    let scene = GaussianScene::new(vec![
        Gaussian3D::isotropic(Vector3::new(-0.5, 0.0, 0.0), 0.1, 0.5, c2),
        Gaussian3D::isotropic(Vector3::new(0.5, 0.0, 0.0), 0.1, 0.5, c1),
    ]);
    let img = render(&scene, &c, bg, &RenderSettings::default()).unwrap();
    let px = img.rgb.pixel(16, 16);
    let want = [0.5, 0.25, 0.25];
    for k in 0..3 {
        assert!((px[k] - want[k]).abs() < 1e-12);
    }
}

#[test]
fn alpha_plus_transmittance_is_one() {
    let mut rng = seeded(4);
    let scene = random_scene(&mut rng, 10);
    let c = cam(32, 4.0);
    // Black splats on a white background: rgb equals the final transmittance.
    let mut black = scene.clone();
    for g in black.gaussians.iter_mut() {
        g.color = Vector3::zeros();
    }
    let img = render(&black, &c, [1.0; 3], &RenderSettings::default()).unwrap();
    for (k, a) in img.alpha.iter().enumerate() {
        assert!((a + img.rgb.data[3 * k] - 1.0).abs() < 1e-9);
        assert!((0.0..=1.0).contains(a));
    }
}

#[test]
fn permutation_leaves_image_bit_identical() {
    let mut rng = seeded(11);
    let scene = random_scene(&mut rng, 10);
    let c = CameraPose::orbit(0.4, 0.2, 3.5, intrinsics(32)).unwrap();
    let a = render(&scene, &c, [0.1; 3], &RenderSettings::default()).unwrap();
    let mut perm = scene.clone();
    perm.gaussians.reverse();
    perm.gaussians.swap(0, 3);
    let b = render(&perm, &c, [0.1; 3], &RenderSettings::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn duplicated_gaussians_are_order_independent() {
    let g = Gaussian3D::isotropic(Vector3::zeros(), 0.2, 0.5, Vector3::new(0.3, 0.6, 0.9));
    let h = Gaussian3D { color: Vector3::new(0.9, 0.1, 0.2), ..g };
    let c = cam(16, 3.0);
    let a = render(&GaussianScene::new(vec![g, h]), &c, [0.0; 3], &RenderSettings::default()).unwrap();
    let b = render(&GaussianScene::new(vec![h, g]), &c, [0.0; 3], &RenderSettings::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn depth_grows_along_the_ray() {
    let c = cam(33, 5.0);
    let mut last = 0.0;
    for k in 0..10 {
        let x = 1.0 - 0.2 * k as f64;
        let scene = GaussianScene::new(vec![Gaussian3D::isotropic(Vector3::new(x, 0.0, 0.0), 0.1, 0.7, Vector3::zeros())]);
        let d = render(&scene, &c, [0.0; 3], &RenderSettings::default()).unwrap().depth[16 * 33 + 16];
        assert!(d > last);
        last = d;
    }
}

#[test]
fn non_finite_parameter_names_the_gaussian() {
    let mut scene = random_scene(&mut seeded(1), 4);
    scene.gaussians[2].mean.y = f64::NAN;
    let err = render(&scene, &cam(16, 3.0), [0.0; 3], &RenderSettings::default()).unwrap_err();
    assert!(matches!(err, geomoment::Error::NonFiniteGaussian { index: 2 }));
}

#[test]
fn zero_loss_gradient_gives_zero_gradients() {
    let mut scene = random_scene(&mut seeded(2), 6);
    let c = cam(16, 3.0);
    let g = render_backward(&mut scene, &c, [0.0; 3], &RgbImage::new(16, 16), &RenderSettings::default()).unwrap();
    assert!(g.to_flat().iter().all(|v| *v == 0.0));
}

#[test]
fn mismatched_loss_gradient_is_a_contract_error() {
    let mut scene = random_scene(&mut seeded(2), 3);
    let c = cam(16, 3.0);
    let err = render_backward(&mut scene, &c, [0.0; 3], &RgbImage::new(8, 16), &RenderSettings::default()).unwrap_err();
    assert!(matches!(err, geomoment::Error::Contract(_)));
}

#[test]
fn single_gaussian_mean_rgb_gradient_matches_finite_differences() {
    let c = cam(32, 3.0);
    let scene = GaussianScene::new(vec![Gaussian3D::new(
        Vector3::new(0.05, -0.1, 0.08),
        Vector3::new(0.25, 0.12, 0.18),
        [0.9, 0.2, -0.3, 0.1],
        0.6,
        Vector3::new(0.7, 0.2, 0.4),
    )]);
    let mask = truncation_band_mask(&scene, &c, 0.05);
    let n = (c.pixel_count() * 3) as f64;
    let mut lg = RgbImage::filled(32, 32, [1.0 / n; 3]);
    for (k, v) in lg.data.iter_mut().enumerate() {
        if mask[k / 3] {
            *v = 0.0;
        }
    }
    let r = check_render_gradients(&scene, &c, [0.3, 0.3, 0.3], &lg, 1e-4);
    assert!(r.max_rel < 1e-4, "{}", r.worst);
}

#[test]
fn random_scene_gradients_match_finite_differences() {
    let mut rng = seeded(99);
    for s in 0..3 {
        let scene = random_scene(&mut rng, 10);
        let c = CameraPose::orbit(0.3 * s as f64, 0.1, 3.5, intrinsics(32)).unwrap();
        let mask = truncation_band_mask(&scene, &c, 0.05);
        let lg = random_loss_grad(&mut rng, &c, &mask);
        let r = check_render_gradients(&scene, &c, [0.2, 0.1, 0.4], &lg, 1e-4);
        assert!(r.max_rel < 1e-4, "scene {s}: {}", r.worst);
    }
}

#[test]
fn backward_is_independent_of_thread_count() {
    let mut rng = seeded(5);
    let scene = random_scene(&mut rng, 10);
    let c = cam(48, 3.0);
    let lg = random_loss_grad(&mut rng, &c, &vec![false; c.pixel_count()]);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let (img, trace) = render_with_trace(&scene, &c, [0.0; 3], &RenderSettings::default()).unwrap();
            (img, backward_from_trace(&scene, &trace, &lg).unwrap())
        })
    };
    let (a, ga) = run(1);
    let (b, gb) = run(3);
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn view_statistics_accumulate_for_visible_gaussians_only() {
    let mut scene = random_scene(&mut seeded(8), 5);
    scene.gaussians[4].mean = Vector3::new(50.0, 0.0, 0.0);
    let c = cam(16, 3.0);
    let lg = RgbImage::filled(16, 16, [1.0; 3]);
    render_backward(&mut scene, &c, [0.0; 3], &lg, &RenderSettings::default()).unwrap();
    assert_eq!(scene.grad_count[4], 0);
    assert!(scene.grad_count[..4].iter().all(|&k| k == 1));
    assert!(scene.grad_accum[..4].iter().all(|&v| v > 0.0));
}

#[test]
fn reference_point_renders_at_camera_distance() {
    let asset = ReferenceAsset::from_points(vec![Vector3::zeros()], vec![Vector3::repeat(1.0)], "dot").unwrap();
    let c = cam(33, 2.5);
    let a = render_reference(&asset, &c).unwrap();
    assert!((a.depth[16 * 33 + 16] - 2.5).abs() < 1e-12);
    let b = render_reference(&asset, &c).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unit_sphere_silhouette_matches_projected_disc() {
    // Splat footprints widen the silhouette by a fraction of the point
    // spacing, so the check needs a dense cloud at a fine resolution.
    let asset = geomoment::toy::sphere(100_000);
    let size = 256;
    let d = 4.0;
    let c = cam(size, d);
    let img = render_reference(&asset, &c).unwrap();
    let covered = img.silhouette().iter().filter(|&&m| m).count() as f64;
    // Apparent radius of a unit sphere seen from distance d.
    let f = c.focal();
    let ang = (1.0 / d).asin();
    let r_px = f * ang.tan();
    let disc = std::f64::consts::PI * r_px * r_px;
    assert!((covered - disc).abs() / disc < 0.05, "covered {covered} disc {disc}");
}
