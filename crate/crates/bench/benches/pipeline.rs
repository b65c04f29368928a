use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lsrl_bench::{preset_vae, sample_frames};
use lsrl_core::sac::{Observation, ObsSpec, ReplayBuffer, SacAgent, SacConfig, Transition};
use lsrl_core::sim::SimConfig;
use lsrl_core::{Action, Env, Tape, TrackSpec};
use std::hint::black_box;

fn encoder(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode");
    for (w, h) in [(64, 48), (160, 120)] {
        let frames = sample_frames(w, h, 4).unwrap();
        for id in 1..=3u8 {
            let vae = preset_vae(id, w, h).unwrap();
            g.bench_with_input(BenchmarkId::new(format!("config{id}"), format!("{w}x{h}")), &frames[2], |b, f| {
                b.iter(|| black_box(vae.encode(f).unwrap()))
            });
        }
    }
    g.finish();
}

fn vae_step(c: &mut Criterion) {
    let frames = sample_frames(64, 48, 32).unwrap();
    let refs: Vec<_> = frames.iter().collect();
    let vae = preset_vae(2, 64, 48).unwrap();
    let latent = vae.config().latent_dim;
    c.bench_function("vae_loss_backward_b32_64x48", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let p = vae.params().bind(&mut tape, true);
            let l = vae.loss_graph(&mut tape, &p, &refs, vec![0.0; refs.len() * latent]).unwrap();
            tape.backward(l.total).unwrap();
            black_box(tape.grad(p.vars()[0]).is_some())
        })
    });
}

fn sac_update(c: &mut Criterion) {
    let dim = 64;
    let mut agent = SacAgent::new(SacConfig::default(), ObsSpec::Latent { dim }, 0).unwrap();
    let mut buf = ReplayBuffer::new(1000, 0);
    for i in 0..256 {
        let o = |k: usize| Observation::Latent((0..dim).map(|j| ((j + k) % 7) as f32 * 0.1).collect());
        buf.push(Transition {
            obs: o(i),
            action: Action::new(0.1, 0.5),
            reward: 1.0,
            next_obs: o(i + 1),
            done: false,
        });
    }
    c.bench_function("sac_update_latent64_b64", |b| b.iter(|| black_box(agent.update(&mut buf, 1).unwrap())));
}

fn sim_step(c: &mut Criterion) {
    let mut env = Env::new(TrackSpec::oval(), SimConfig::default(), Default::default()).unwrap();
    env.reset(0);
    c.bench_function("sim_step_render_64x48", |b| {
        b.iter(|| {
            let r = env.step(Action::new(0.05, 0.4)).unwrap();
            if r.done {
                env.reset(1);
            }
            black_box(r.reward)
        })
    });
}

criterion_group!(benches, encoder, vae_step, sac_update, sim_step);
criterion_main!(benches);
