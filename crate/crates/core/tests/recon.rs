use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segvggt::eval::{reference_cloud, transfer_labels, ProtocolOptions};
use segvggt::recon::{
    assemble_instances, binarize, map_to_reference, read_predictions, resolve_label_maps, score,
    superpoint_vote, unproject, write_predictions, DepthBlock, InstancePrediction, PredictionFile,
    PredictionIoError, ReconError,
};
use segvggt::scenegen::{
    generate_scene, mat_t_vec, render_scene, CameraParams, LayoutBounds, RenderedScene, SceneSpec,
    INVALID_DEPTH,
};

fn test_scene(seed: u64, objects: usize) -> (SceneSpec, RenderedScene) {
    let spec = generate_scene(seed, objects, 4, &LayoutBounds::default()).unwrap();
    let scene = segvggt::scenegen::build_scene(&spec, "t", (32, 32), 1).unwrap();
    (spec, scene)
}

fn random_camera(rng: &mut ChaCha8Rng) -> CameraParams {
    let q: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    CameraParams {
        rotation: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
        translation: [
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        ],
        fov: [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
    }
}

/// One prediction per gt instance, masks equal to the full-resolution maps.
fn gt_predictions(scene: &RenderedScene) -> Vec<InstancePrediction> {
    scene
        .instances
        .iter()
        .enumerate()
        .map(|(i, &(id, class))| InstancePrediction {
            query: i,
            class,
            class_prob: 1.0,
            masks: scene
                .views
                .iter()
                .map(|v| v.instance_map.iter().map(|&x| x == id).collect())
                .collect(),
            mask_res: (scene.height(), scene.width()),
            score: 1.0 - 0.01 * i as f64,
        })
        .collect()
}

#[test]
fn reprojection_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..2000 {
        let cam = random_camera(&mut rng);
        let (h, w) = (48, 64);
        let (u, v) = (
            rng.random_range(0..w) as f64 + 0.5,
            rng.random_range(0..h) as f64 + 0.5,
        );
        let d = rng.random_range(0.1..20.0);
        let x = cam.unproject_point(u, v, d, h, w);
        let (pu, pv, pz) = cam.project(x, h, w);
        assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9 && (pz - d).abs() < 1e-9);
    }
}

#[test]
fn unprojected_depth_hits_analytic_surface() {
    let (spec, _) = test_scene(4, 5);
    let views = render_scene(&spec, (24, 32), 1).unwrap();
    for view in &views {
        let cam = &view.camera;
        let pts = unproject(&view.depth, cam, (24, 32));
        assert_eq!(
            pts.len(),
            view.depth.iter().filter(|&&d| d != INVALID_DEPTH).count()
        );
        for (p, x) in pts {
            let (u, v) = ((p % 32) as f64 + 0.5, (p / 32) as f64 + 0.5);
            let dir = mat_t_vec(&cam.rotation_matrix(), cam.pixel_ray_camera(u, v, 24, 32));
            let (t, id, _) = spec.cast(cam.center(), dir).unwrap();
            assert_eq!(id, view.instance_map[p]);
            let o = cam.center();
            for c in 0..3 {
                assert!((x[c] - (o[c] + t * dir[c])).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn ground_truth_masks_recover_every_visible_point() {
    for seed in [2, 7, 19] {
        let (_, scene) = test_scene(seed, 6);
        let preds = gt_predictions(&scene);
        let reference = reference_cloud(&scene);
        let labels =
            transfer_labels(&scene, &reference, &preds, &ProtocolOptions::default()).unwrap();
        for (&gt, &got) in reference.labels.iter().zip(&labels) {
            let expect = scene
                .instances
                .iter()
                .position(|&(id, _)| id == gt)
                .map_or(-1, |i| i as i32);
            assert_eq!(got, expect);
        }
        // assembly with gt geometry reproduces the object points of the reference
        let depths: Vec<Vec<f64>> = scene.views.iter().map(|v| v.depth.clone()).collect();
        let cams: Vec<_> = scene.views.iter().map(|v| v.camera).collect();
        let seg =
            assemble_instances(&preds, &depths, &cams, (scene.height(), scene.width())).unwrap();
        let object_points: Vec<_> = reference
            .points
            .iter()
            .zip(&reference.labels)
            .filter(|(_, &l)| l >= 0)
            .map(|(p, _)| *p)
            .collect();
        assert_eq!(seg.points, object_points);
    }
}

#[test]
fn assembly_rules() {
    let (_, scene) = test_scene(3, 4);
    let depths: Vec<Vec<f64>> = scene.views.iter().map(|v| v.depth.clone()).collect();
    let cams: Vec<_> = scene.views.iter().map(|v| v.camera).collect();
    let res = (scene.height(), scene.width());
    let empty = InstancePrediction {
        query: 0,
        class: 0,
        class_prob: 1.0,
        masks: vec![vec![false; res.0 * res.1]; 4],
        mask_res: res,
        score: 0.5,
    };
    assert!(assemble_instances(&[empty], &depths, &cams, res)
        .unwrap()
        .points
        .is_empty());

    let preds = gt_predictions(&scene);
    let (id, _) = scene.instances[0];
    let seg = assemble_instances(&preds[..1], &depths, &cams, res).unwrap();
    let mut expect = Vec::new();
    for v in &scene.views {
        for (p, x) in unproject(&v.depth, &v.camera, res) {
            if v.instance_map[p] == id {
                expect.push(x);
            }
        }
    }
    assert_eq!(seg.instance_points(0), expect);

    let mut twin = preds[0].clone();
    twin.score = 0.9;
    let low = InstancePrediction {
        score: 0.3,
        ..preds[0].clone()
    };
    let seg = assemble_instances(&[low, twin], &depths, &cams, res).unwrap();
    assert!(seg.labels.iter().all(|&l| l == 1));
    assert_eq!(seg.scores, vec![0.3, 0.9]);
}

#[test]
fn majority_rule() {
    let cam = CameraParams {
        rotation: [1.0, 0.0, 0.0, 0.0],
        translation: [0.0; 3],
        fov: [1.0, 1.0],
    };
    let cams = [cam; 3];
    let depths = vec![vec![5.0; 16]; 3];
    let x = cam.unproject_point(1.5, 2.5, 5.0, 4, 4);
    let pixel = 2 * 4 + 1;
    let map = |on: bool| {
        let mut m = vec![-1; 16];
        if on {
            m[pixel] = 0;
        }
        m
    };
    let one = [map(true), map(false), map(false)];
    let r = map_to_reference(&[x], &one, (4, 4), &cams, &depths, (4, 4), 1e-3).unwrap();
    assert_eq!(r.labels, vec![-1]);
    let two = [map(true), map(true), map(false)];
    let r = map_to_reference(&[x], &two, (4, 4), &cams, &depths, (4, 4), 1e-3).unwrap();
    assert_eq!(r.labels, vec![0]);
    let empty = [map(false), map(false), map(false)];
    assert_eq!(
        map_to_reference(&[x], &empty, (4, 4), &cams, &depths, (4, 4), 1e-3)
            .unwrap()
            .labels,
        vec![-1]
    );
    // behind every camera: invisible
    let r = map_to_reference(
        &[[0.0, 0.0, -3.0]],
        &two,
        (4, 4),
        &cams,
        &depths,
        (4, 4),
        1e-3,
    )
    .unwrap();
    assert_eq!((r.labels, r.invisible), (vec![-1], 1));
    assert!(matches!(
        map_to_reference(&[x], &two[..2], (4, 4), &cams, &depths, (4, 4), 1e-3),
        Err(ReconError::Shape(_))
    ));
}

#[test]
fn label_maps_prefer_higher_score_then_lower_index() {
    let p = |score: f64, mask: Vec<bool>| InstancePrediction {
        query: 0,
        class: 0,
        class_prob: 1.0,
        masks: vec![mask],
        mask_res: (1, 3),
        score,
    };
    let preds = [
        p(0.5, vec![true, true, false]),
        p(0.7, vec![false, true, true]),
        p(0.7, vec![false, false, true]),
    ];
    assert_eq!(resolve_label_maps(&preds, 1, (1, 3)), vec![vec![0, 1, 1]]);
}

#[test]
fn binarize_and_score_examples() {
    assert_eq!(binarize(&[0.5; 4], 0.5).unwrap(), vec![false; 4]);
    assert_eq!(binarize(&[0.4, 0.6], 0.5).unwrap(), vec![false, true]);
    assert_eq!(binarize(&[0.4], 0.0), Err(ReconError::Threshold(0.0)));
    assert_eq!(score(&[1.0, 0.0, 0.0], &[1.0, 1.0], 0.5), 1.0);
    assert_eq!(score(&[0.9, 0.1, 0.0], &[0.2, 0.4], 0.5), 0.0);
    assert!((score(&[0.8, 0.1, 0.1], &[0.9, 0.9, 0.1], 0.5) - 0.72).abs() < 1e-15);
}

#[test]
fn superpoint_vote_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let labels: Vec<i32> = (0..n).map(|_| rng.random_range(-1..4)).collect();
        let segments: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let once = superpoint_vote(&labels, &segments);
        assert_eq!(superpoint_vote(&once, &segments), once);
        let singletons: Vec<usize> = (0..n).collect();
        assert_eq!(superpoint_vote(&labels, &singletons), labels);
    }
    assert_eq!(superpoint_vote(&[1, 1, 2], &[0, 0, 0]), vec![1, 1, 1]);
}

#[test]
fn prediction_file_round_trip() {
    let (_, scene) = test_scene(5, 3);
    let depths: Vec<Vec<f64>> = scene.views.iter().map(|v| v.depth.clone()).collect();
    let cams: Vec<_> = scene.views.iter().map(|v| v.camera).collect();
    let preds = gt_predictions(&scene);
    let seg = assemble_instances(&preds, &depths, &cams, (32, 32)).unwrap();
    let file = PredictionFile::from_parts(
        &seg,
        &preds,
        4,
        Some(DepthBlock {
            res: (32, 32),
            depths,
        }),
    );
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.svpr");
    write_predictions(&path, &file).unwrap();
    let back = read_predictions(&path).unwrap();
    assert_eq!(back, file);
    let restored = back.predictions().unwrap();
    assert_eq!(
        restored.iter().map(|p| &p.masks).collect::<Vec<_>>(),
        preds.iter().map(|p| &p.masks).collect::<Vec<_>>()
    );

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        read_predictions(&path),
        Err(PredictionIoError::Parse { .. })
    ));
    std::fs::write(&path, b"NOPE").unwrap();
    assert!(matches!(
        read_predictions(&path),
        Err(PredictionIoError::Parse { offset: 0, .. })
    ));
}
