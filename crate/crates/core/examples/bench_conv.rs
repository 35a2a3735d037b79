use ctrldiff::graph::Graph;
use ctrldiff::rng::stream;
use ctrldiff::tensor::Tensor;
use std::time::Instant;

fn main() {
    // width-16 UNet level-0 conv: batch 8, 16ch, 32x32, 3x3
    for (n, c, oc, hw) in [(8usize, 16usize, 16usize, 32usize), (8, 32, 32, 16), (8, 64, 64, 8), (8, 32, 32, 32)] {
        let x = Tensor::<f32>::randn([n, c, hw, hw], &mut stream(1, "x", 0));
        let w = Tensor::<f32>::randn([oc, c, 3, 3], &mut stream(1, "w", 0));
        let b = Tensor::<f32>::randn([oc], &mut stream(1, "b", 0));
        let iters = 50;
        let t0 = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..iters {
            let mut g = Graph::new();
            let ix = g.leaf(x.clone(), true);
            let iw = g.leaf(w.clone(), true);
            let ib = g.leaf(b.clone(), true);
            let y = g.conv2d(ix, iw, Some(ib), 1, 1);
            let loss = g.mean_all(y);
            let grads = g.backward(loss);
            sink += grads.get(iw).unwrap().data()[0];
        }
        let dt = t0.elapsed().as_secs_f64() / iters as f64;
        let macs = (n * oc * hw * hw * c * 9) as f64;
        let flops = macs * 2.0 * 3.0; // fwd + dW + dX
        println!("conv n{n} c{c}->{oc} {hw}x{hw}: {:.3} ms/iter  ~{:.1} GFLOP/s (sink {sink:.3})", dt * 1e3, flops / dt / 1e9);
    }
}
