use nrpm::attack::{robust_accuracy, AttackSpec};
use nrpm::data::synth_digits;
use nrpm::layers::{Arch, ModelSpec};
use nrpm::reprogram::{pretrain, reprogram_p3, TrainHyper};
use std::time::Instant;

fn main() {
    let train = synth_digits(8000, 1).unwrap();
    let test = synth_digits(2000, 2).unwrap();
    let spec = ModelSpec::plain(Arch::Mlp2);
    let (model, _) = pretrain(&spec, &train, &TrainHyper::new(10, 0.5, 5e-4, 7), None).unwrap();
    let (timgs, tl) = (&test.images, &test.labels);

    for (lr, te, ep) in [(0.01, 0.15, 12), (0.01, 0.1, 15)] {
        let t0 = Instant::now();
        let ft3 = TrainHyper::new(ep, lr, 5e-4, 7).with_attack(AttackSpec::fgsm(te));
        let (p3, log) = reprogram_p3(&model, &train, 1, 1e-3, &ft3, None).unwrap();
        let nat = robust_accuracy(&p3, timgs, tl, &AttackSpec::fgsm(0.0), 128).unwrap();
        let rob = robust_accuracy(&p3, timgs, tl, &AttackSpec::fgsm(0.1), 128).unwrap();
        println!("p3 lr={lr} trainε={te} e={ep}: λ={:.3?} nat={nat:.3} rob@0.1={rob:.3} [{:.0?}]",
                 log.final_lambdas().unwrap(), t0.elapsed());
    }
}
