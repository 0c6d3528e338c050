use cvs_core::encoders::{EncoderConfig, LiftingTable, StudentEncoder, TeacherEncoder};
use cvs_core::mapeval::Roi;
use cvs_core::scenegen::{generate_scene, render_cameras, render_overhead, CameraRig, SceneParams};
use cvs_core::supervision::{bev_alignment_value, SupervisionConfig, Variant};
use cvs_core::tensor::{Tape, Tensor};
use cvs_core::Error;

#[test]
fn occluders_change_camera_features_but_not_overhead_features() {
    let grid = Roi::Standard.grid();
    let rig = CameraRig::default();
    let table = LiftingTable::build(&rig, &grid).unwrap();
    let enc = EncoderConfig::default();
    let teacher = TeacherEncoder::<f64>::new(&enc, grid, 0).unwrap();
    let student = StudentEncoder::<f64>::new(&enc, grid, 0).unwrap();
    let mut with_occluders = 0;
    for seed in 0..100 {
        let scene = generate_scene(&SceneParams::default().with_seed(seed)).unwrap();
        if scene.occluders.is_empty() {
            continue;
        }
        with_occluders += 1;
        let clear = scene.without_occluders();
        let fa = teacher.forward(&render_overhead(&scene, &grid, 3)).unwrap();
        let fa_clear = teacher.forward(&render_overhead(&clear, &grid, 3)).unwrap();
        assert_eq!(fa.tensor.to_bytes(), fa_clear.tensor.to_bytes(), "seed {seed}");
        let fc = student.forward(&render_cameras(&scene, &rig, &grid), &table).unwrap();
        let fc_clear = student.forward(&render_cameras(&clear, &rig, &grid), &table).unwrap();
        assert_ne!(fc.tensor.to_bytes(), fc_clear.tensor.to_bytes(), "seed {seed}");
    }
    assert!(with_occluders >= 90, "{with_occluders}");
}

#[test]
fn cells_outside_every_frustum_take_the_default_feature() {
    let grid = Roi::Standard.grid();
    let rig = CameraRig::default();
    let table = LiftingTable::build(&rig, &grid).unwrap();
    let student = StudentEncoder::<f64>::new(&EncoderConfig::default(), grid, 3).unwrap();
    let unseen: Vec<usize> = (0..grid.cells()).filter(|&i| table.index[i].is_none()).collect();
    assert!(!unseen.is_empty());
    let c = EncoderConfig::default().camera_channels;
    let lifted = |fill: f64| {
        let mut tape = Tape::new();
        let bound = student.bind(&mut tape);
        let imgs: Vec<_> = rig
            .cameras
            .iter()
            .map(|cam| tape.constant(Tensor::full([3, cam.image_size[1], cam.image_size[0]], fill)))
            .collect();
        let out = student.forward_var(&mut tape, &bound, &imgs, &table).unwrap();
        tape.value(out.lifted).clone()
    };
    let default = student.params.get(student.params.index_of("student.default").unwrap()).clone();
    let (a, b) = (lifted(0.1), lifted(0.9));
    for &i in &unseen {
        for ch in 0..c {
            let k = ch * grid.cells() + i;
            assert_eq!(a.data()[k], default.data()[ch]);
            assert_eq!(b.data()[k], default.data()[ch]);
        }
    }
    let seen = (0..grid.cells()).find(|&i| table.index[i].is_some()).unwrap();
    assert!((0..c).any(|ch| a.data()[ch * grid.cells() + seen] != b.data()[ch * grid.cells() + seen]));
}

#[test]
fn student_features_cannot_stand_in_for_the_teacher() {
    let grid = Roi::Standard.grid();
    let rig = CameraRig::default();
    let table = LiftingTable::build(&rig, &grid).unwrap();
    let enc = EncoderConfig::default();
    let scene = generate_scene(&SceneParams::default().with_seed(1)).unwrap();
    let student = StudentEncoder::<f64>::new(&enc, grid, 0).unwrap();
    let fc = student.forward(&render_cameras(&scene, &rig, &grid), &table).unwrap();
    let cfg = SupervisionConfig::new(Variant::NormOnly, 1.0);
    assert!(matches!(bev_alignment_value(&fc, &fc, None, &cfg), Err(Error::TeacherNotFrozen)));
    let mut teacher = TeacherEncoder::<f64>::new(&enc, grid, 0).unwrap();
    let overhead = render_overhead(&scene, &grid, 3);
    assert!(matches!(
        bev_alignment_value(&fc, &teacher.forward(&overhead).unwrap(), None, &cfg),
        Err(Error::TeacherNotFrozen)
    ));
    teacher.freeze();
    let l = bev_alignment_value(&fc, &teacher.forward(&overhead).unwrap(), None, &cfg).unwrap();
    assert!(l.is_finite() && l > 0.0);
}
