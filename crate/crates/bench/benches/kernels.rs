use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use segpatch::applicator::{apply_patch, PatchState, Transform};
use segpatch::losses::squared_distance_transform;
use segpatch::placement::{compute_entropy_map, dilate_mask, Placement};
use segpatch_bench::{desk_data, desk_models, speckle_mask};

fn placement(c: &mut Criterion) {
    let mask = speckle_mask(256, 512, 0.02);
    for k in [5, 15] {
        c.bench_function(&format!("dilate_256x512_k{k}"), |b| b.iter(|| dilate_mask(black_box(&mask), k).unwrap()));
    }
    c.bench_function("distance_transform_256x512", |b| b.iter(|| squared_distance_transform(black_box(&mask))));
}

fn forward(c: &mut Criterion) {
    let data = desk_data(1);
    let (vit, cnn) = desk_models();
    let image = &data[0].image;
    c.bench_function("vit_forward_128x256", |b| b.iter(|| vit.forward(black_box(image)).unwrap()));
    c.bench_function("cnn_forward_128x256", |b| b.iter(|| cnn.forward(black_box(image)).unwrap()));
    let probs = cnn.forward(image).unwrap().probabilities;
    c.bench_function("entropy_map_128x256", |b| b.iter(|| compute_entropy_map(black_box(&probs)).unwrap()));
}

fn composite(c: &mut Criterion) {
    let data = desk_data(1);
    let image = &data[0].image;
    let patch = PatchState::filled(32, 0.5).unwrap();
    let place = Placement::center((128, 256), 32);
    let warp = Transform {
        scale: 1.05,
        angle_deg: 6.0,
        dy: 2,
        dx: -3,
    };
    c.bench_function("apply_patch_identity", |b| {
        b.iter(|| apply_patch(black_box(image), &patch, &place, &Transform::IDENTITY).unwrap())
    });
    c.bench_function("apply_patch_warped", |b| b.iter(|| apply_patch(black_box(image), &patch, &place, &warp).unwrap()));
}

criterion_group!(benches, placement, forward, composite);
criterion_main!(benches);
