use gsmooth::data::synth;
use gsmooth::layers::{DatasetObjective, Network, NetworkConfig};
use gsmooth::optim::ComponentObjective;

fn main() {
    let (train, _) = synth::generate_sets(5000, 10, 1).unwrap();
    // replicate the runner's pixel noise 0.5 + split is skipped; close enough
    let net = Network::new(NetworkConfig::benchmark_cnn([1e-7, 1e-7, 1e-5, 1e-5])).unwrap();
    let params = net.init_params(42);
    let obj = DatasetObjective::new(&net, train.images(), train.labels()).unwrap();
    let mut g = vec![0.0; net.param_count()];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    obj.full_raw_grad(&params, &mut g).unwrap();
    println!("||full grad at init|| = {}", norm(&g));

    let mut mean_norm = 0.0;
    for k in 0..50 {
        obj.raw_grad(k * 7, &params, &mut g).unwrap();
        mean_norm += norm(&g) / 50.0;
    }
    println!("mean ||per-sample grad at init|| = {mean_norm}");
}
