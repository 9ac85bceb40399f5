use sfd_core::*;
use sfd_core::tensor::Tensor;
fn main() {
    let cfg = config::RunConfig::load(std::path::Path::new("/root/scratch/train.toml")).unwrap();
    let eps = pipeline::load_episodes(&cfg, scene::TaskTemplate::Packing, "eval").unwrap();
    let bundle = sfdnet::SfdBundle::load(&cfg.checkpoint_path(true)).unwrap();
    let ep = &eps[0];
    let g = scene::ground_targets(ep, &ep.instruction).unwrap();
    let net = bundle.net(0);
    let tokens = sfdnet::text::tokenize(&ep.instruction);
    let slab1 = sfdnet::initial_grid_frame(&g.boxes.0, net.cfg.grid, 64, 64);
    let slab2 = sfdnet::initial_grid_frame(&g.boxes.1, net.cfg.grid, 64, 64);
    let (c1, c2) = (net.context_latent(&slab1), net.context_latent(&slab2));
    let mut rng = rng::Rng::seed(5);
    let z = Tensor::new(vec![net.cfg.frames, net.cfg.latent_dim], rng.normal_vec_f32(net.cfg.frames*net.cfg.latent_dim));
    let rms = |v: &[f32]| (v.iter().map(|x| (x*x) as f64).sum::<f64>()/v.len() as f64).sqrt();
    for t in [20usize, 60, 100] {
        let e1 = net.predict_eval(&z, t, &tokens, &c1);
        let e2 = net.predict_eval(&z, t, &tokens, &c2);
        let diff: Vec<f32> = e1.data().iter().zip(e2.data()).map(|(a,b)| a-b).collect();
        println!("t={t}: rms(e1)={:.3} rms(ctx-swap diff)={:.4}", rms(e1.data()), rms(&diff));
    }
    // sensitivity to t
    let e_a = net.predict_eval(&z, 20, &tokens, &c1);
    let e_b = net.predict_eval(&z, 100, &tokens, &c1);
    let dt: Vec<f32> = e_a.data().iter().zip(e_b.data()).map(|(a,b)| a-b).collect();
    println!("t-sensitivity rms diff: {:.4}", rms(&dt));
}
