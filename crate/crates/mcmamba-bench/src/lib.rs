//! Shared helpers for the criterion benchmarks in `benches/`.

use mcmamba_core::rng::Rng;
use mcmamba_core::ssm::SsmParams;
use mcmamba_core::tensor::Tensor;

/// Discretized (Ā, B̄x, C) pairs for a random selective SSM, the common input
/// of the scan kernels under benchmark.
pub struct ScanFixture {
    pub params: SsmParams,
    pub x: Tensor,
    pub abar: Vec<f64>,
    pub bx: Vec<f64>,
    pub c: Vec<f64>,
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

pub fn scan_fixture(seed: u64, len: usize, d_inner: usize, d_state: usize) -> ScanFixture {
    let mut rng = Rng::new(seed);
    let params = SsmParams::init(&mut rng, d_inner, d_state);
    let x = Tensor::from_fn(&[d_inner, len], |_| rng.range(-1.0, 1.0));
    let xt = x.swap_last2().expect("layout");
    let (delta, b, c) = params.project(&xt).expect("projection");
    let a = params.a();
    let mut abar = vec![0.0; len * d_inner * d_state];
    let mut bx = vec![0.0; len * d_inner * d_state];
    for t in 0..len {
        for i in 0..d_inner {
            let dt = delta.data()[t * d_inner + i];
            let xv = xt.data()[t * d_inner + i];
            for j in 0..d_state {
                abar[(t * d_inner + i) * d_state + j] =
                    (dt * a.data()[i * d_state + j]).exp();
                bx[(t * d_inner + i) * d_state + j] = dt * b.data()[t * d_state + j] * xv;
            }
        }
    }
    ScanFixture {
        params,
        x,
        abar,
        bx,
        c: c.to_vec(),
        len,
        d_inner,
        d_state,
    }
}
