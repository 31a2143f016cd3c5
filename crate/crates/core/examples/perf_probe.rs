use swin_umamba::tensor::{conv, ops, no_grad, DType, Tensor};
use std::time::Instant;

fn timeit(name: &str, macs: f64, f: impl Fn()) {
    let t0 = Instant::now();
    f();
    let dt = t0.elapsed().as_secs_f64();
    println!("{name:<34} {dt:7.3}s  {:6.2} GMAC/s", macs / dt / 1e9);
}

fn main() {
    no_grad(|| {
        // decoder-style conv: 192->96 @ 160x160 k3
        let x = Tensor::zeros(DType::F32, &[1, 192, 160, 160]);
        let w = Tensor::zeros(DType::F32, &[96, 192, 3, 3]);
        timeit("conv 192->96 @160^2 k3", 96.0*160.0*160.0*192.0*9.0, || { conv::conv2d(&x, &w, None, 1, 1, 1).unwrap(); });

        // big fuse conv: 1536->768 @ 20x20 k3
        let x = Tensor::zeros(DType::F32, &[1, 1536, 20, 20]);
        let w = Tensor::zeros(DType::F32, &[768, 1536, 3, 3]);
        timeit("conv 1536->768 @20^2 k3", 768.0*400.0*1536.0*9.0, || { conv::conv2d(&x, &w, None, 1, 1, 1).unwrap(); });

        // full-res conv: 96->48 @ 320x320
        let x = Tensor::zeros(DType::F32, &[1, 96, 320, 320]);
        let w = Tensor::zeros(DType::F32, &[48, 96, 3, 3]);
        timeit("conv 96->48 @320^2 k3", 48.0*320.0*320.0*96.0*9.0, || { conv::conv2d(&x, &w, None, 1, 1, 1).unwrap(); });

        // linear: VSS proj at stage2 scale
        let x = Tensor::zeros(DType::F32, &[1, 80, 80, 96]);
        let w = Tensor::zeros(DType::F32, &[192, 96]);
        timeit("linear 96->192 @80^2", 6400.0*96.0*192.0, || { ops::linear(&x, &w, None).unwrap(); });

        // bigger linear
        let x = Tensor::zeros(DType::F32, &[1, 20, 20, 768]);
        let w = Tensor::zeros(DType::F32, &[1536, 768]);
        timeit("linear 768->1536 @20^2", 400.0*768.0*1536.0, || { ops::linear(&x, &w, None).unwrap(); });

        // permute cost
        let x = Tensor::zeros(DType::F32, &[1, 192, 80, 80]);
        timeit("nchw_to_nhwc 192@80^2 x100", 0.0001, || { for _ in 0..100 { ops::nchw_to_nhwc(&x).unwrap(); } });

        // silu elementwise
        let x = Tensor::zeros(DType::F32, &[1, 192, 160, 160]);
        timeit("silu 4.9M elems x20", 0.0001, || { for _ in 0..20 { ops::silu(&x).unwrap(); } });

        // depthwise conv
        let x = Tensor::zeros(DType::F32, &[1, 192, 80, 80]);
        let w = Tensor::zeros(DType::F32, &[192, 1, 3, 3]);
        timeit("dwconv 192 @80^2 x10", 10.0*192.0*6400.0*9.0, || { for _ in 0..10 { conv::conv2d(&x, &w, None, 1, 1, 192).unwrap(); } });

        // scan: stage2-like
        let x = Tensor::zeros(DType::F32, &[1, 6400, 192]);
        let mut rng = swin_umamba::rng::Stream::new(1);
        let p = swin_umamba::ssm::S6Params::init(192, 16, 6, &mut rng, DType::F32).unwrap();
        timeit("s6 scan L=6400 d=192 x4", 4.0*6400.0*192.0*(38.0+6.0*16.0+16.0*4.0), || { for _ in 0..4 { swin_umamba::ssm::s6_scan_sequential(&x, &p).unwrap(); } });
    });
}
