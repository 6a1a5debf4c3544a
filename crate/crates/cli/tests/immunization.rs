//! Immunization on the bundled two-concept world, scored by denoising loss
//! rather than by generations.

use mima_cli::presets;
use mima_cli::world::World;
use mima_core::adapt::adapt;
use mima_core::diffusion::ConceptSpec;
use mima_core::immunize::{run_jt, run_mima, Setup};
use mima_core::{Matrix, ParamSet, Rng};

struct Fixture {
    world: World,
    targets: Vec<ConceptSpec>,
    data: Vec<Matrix>,
    c_reg: Matrix,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = presets::two_concept();
    let world = World::build(&cfg, seed).unwrap();
    let g = &cfg.groups[0];
    Fixture {
        targets: g.targets.iter().map(|&k| world.pool[k].clone()).collect(),
        data: g.targets.iter().map(|&k| world.pool_data[k].clone()).collect(),
        c_reg: world.c_reg(&g.others).unwrap(),
        world,
    }
}

impl Fixture {
    fn setup(&self) -> Setup<'_> {
        Setup {
            pretrained: &self.world.pretrained,
            concepts: &self.targets,
            data: &self.data,
            reg_embeddings: &self.c_reg,
            schedule: &self.world.schedule,
        }
    }

    /// Mean over targets of the loss after the preset's FullFineTune attack.
    fn attacked_loss(&self, params: &ParamSet) -> f64 {
        let attack = &presets::two_concept().attacks[0];
        let model = self.world.pretrained.with_params(params.clone()).unwrap();
        let losses: Vec<f64> = self
            .targets
            .iter()
            .zip(&self.data)
            .enumerate()
            .map(|(i, (c, x))| {
                let mut rng = Rng::new(1000 + i as u64);
                adapt(&model, attack, c, x, &self.world.schedule, &mut rng).unwrap().final_loss
            })
            .collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

#[test]
fn immunized_loss_after_attack_exceeds_unprotected() {
    let cfg = presets::two_concept();
    let mut hits = 0;
    for seed in 0..5 {
        let f = fixture(seed);
        let (theta, _) = run_mima(&f.setup(), &cfg.immunize, &mut Rng::new(seed)).unwrap();
        let base = f.attacked_loss(f.world.pretrained.params());
        let imm = f.attacked_loss(&theta);
        println!("seed {seed}: attacked loss {base:.4} -> {imm:.4} (x{:.2})", imm / base);
        hits += usize::from(imm >= 1.2 * base);
    }
    assert!(hits >= 4, "ratio >= 1.2 in {hits}/5 seeds");
}

#[test]
fn jt_is_not_the_mima_path() {
    let mut cfg = presets::two_concept().immunize;
    cfg.epochs = 5;
    let f = fixture(0);
    let (mima, mt) = run_mima(&f.setup(), &cfg, &mut Rng::new(9)).unwrap();
    let (jt, jtt) = run_jt(&f.setup(), &cfg, &mut Rng::new(9)).unwrap();
    assert_ne!(mima, jt);
    let objectives = |t: &mima_core::immunize::ImmunizeTrace| t.records.iter().map(|r| r.upper_objective).collect::<Vec<_>>();
    assert_ne!(objectives(&mt), objectives(&jtt));
}
