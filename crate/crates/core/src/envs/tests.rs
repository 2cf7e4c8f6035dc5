use rand::Rng as _;

use super::deathmatch::{FORWARD as DM_FORWARD, SHOOT as DM_SHOOT, TURN_LEFT};
use super::gridbasic::{LEFT, RIGHT, SHOOT};
use super::*;
use crate::rng::rng_from_seed;

fn all_kinds() -> Vec<EnvConfig> {
    [EnvKind::GridBasic, EnvKind::MiniDeathmatch, EnvKind::Hallway]
        .into_iter()
        .map(|kind| EnvConfig {
            kind,
            ..EnvConfig::default()
        })
        .collect()
}

fn rollout(cfg: &EnvConfig, seed: u64, actions: &[usize], k: u32) -> Vec<StepResult> {
    let mut env = cfg.build().unwrap();
    env.reset(seed);
    let mut out = Vec::new();
    for &a in actions {
        if env.is_done() {
            break;
        }
        let a = a % env.num_actions();
        out.push(frame_skip_step(env.as_mut(), a, k).unwrap());
    }
    out
}

#[test]
fn same_seed_same_trajectory() {
    let mut rng = rng_from_seed(1);
    for cfg in all_kinds() {
        let actions: Vec<usize> = (0..400).map(|_| rng.gen_range(0..5)).collect();
        let mut a = cfg.build().unwrap();
        let mut b = cfg.build().unwrap();
        assert_eq!(a.reset(17), b.reset(17));
        assert_eq!(rollout(&cfg, 17, &actions, 4), rollout(&cfg, 17, &actions, 4));
        assert_eq!(rollout(&cfg, 3, &actions, 0), rollout(&cfg, 3, &actions, 0));
    }
}

#[test]
fn gridbasic_spawn_columns_uniform() {
    let mut env = GridBasic::new(GridBasicConfig::default()).unwrap();
    let mut counts = [0f64; 11];
    for seed in 0..1000 {
        env.reset(seed);
        assert_eq!(env.agent_col(), 5);
        counts[env.monster_col()] += 1.0;
    }
    let expect = 1000.0 / 11.0;
    let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
    // 99.9th percentile of chi-square with 10 degrees of freedom
    assert!(chi2 < 29.59, "chi2 {chi2} counts {counts:?}");
}

fn aligned_gridbasic(cfg: GridBasicConfig) -> GridBasic {
    let mut env = GridBasic::new(cfg).unwrap();
    env.reset(0);
    env.set_monster_col(env.agent_col()).unwrap();
    env
}

#[test]
fn gridbasic_reward_rules() {
    let mut env = aligned_gridbasic(GridBasicConfig::default());
    let r = env.step(SHOOT).unwrap();
    assert_eq!((r.reward, r.done, r.kills), (100.0, true, 1));
    assert!(matches!(env.step(SHOOT), Err(Error::State(_))));

    let mut env = GridBasic::new(GridBasicConfig::default()).unwrap();
    env.reset(0);
    env.set_monster_col(0).unwrap();
    let r = env.step(SHOOT).unwrap();
    assert_eq!((r.reward, r.done), (-6.0, false));
    assert!(matches!(env.step(3), Err(Error::Index(_))));

    let mut total = 0.0;
    let mut n = 0;
    loop {
        let r = env.step(if n % 2 == 0 { LEFT } else { RIGHT }).unwrap();
        total += r.reward;
        n += 1;
        if r.done {
            assert!(r.timed_out);
            break;
        }
    }
    assert_eq!(n, 299);
    assert_eq!(total, -299.0);
}

#[test]
fn gridbasic_pure_movement_times_out_at_minus_300() {
    let mut env = GridBasic::new(GridBasicConfig::default()).unwrap();
    env.reset(9);
    let mut total = 0.0;
    for t in 0..300 {
        let r = env.step(if t % 7 < 3 { LEFT } else { RIGHT }).unwrap();
        total += r.reward;
        assert_eq!(r.done, t == 299);
    }
    assert_eq!(total, -300.0);
}

#[test]
fn frame_skip_examples() {
    let mut a = GridBasic::new(GridBasicConfig::default()).unwrap();
    let mut b = a.clone();
    a.reset(4);
    b.reset(4);
    assert_eq!(frame_skip_step(&mut a, RIGHT, 0).unwrap(), b.step(RIGHT).unwrap());

    let r = frame_skip_step(&mut a, LEFT, 4).unwrap();
    assert_eq!((r.reward, r.done, a.tic()), (-5.0, false, 6));

    let mut env = aligned_gridbasic(GridBasicConfig {
        monster_health: 2,
        ..GridBasicConfig::default()
    });
    // simulate the rule sequence by hand: tic 1 hit, tic 2 kill
    let expected = -1.0 + (-1.0 + 101.0);
    let r = frame_skip_step(&mut env, SHOOT, 4).unwrap();
    assert_eq!((r.reward, r.done, env.tic()), (expected, true, 2));
    assert_eq!(r.reward, -2.0 + 101.0);
}

#[test]
fn frame_skip_matches_manual_steps() {
    let mut rng = rng_from_seed(2);
    for cfg in all_kinds() {
        for trial in 0..30 {
            let mut env = cfg.build().unwrap();
            env.reset(trial);
            let mut manual = cfg.build().unwrap();
            manual.reset(trial);
            for _ in 0..40 {
                if env.is_done() {
                    break;
                }
                let a = rng.gen_range(0..env.num_actions());
                let k = rng.gen_range(0..6);
                let r = frame_skip_step(env.as_mut(), a, k).unwrap();
                let (mut reward, mut kills, mut deaths) = (0.0, 0, 0);
                let mut last = None;
                for _ in 0..=k {
                    let s = manual.step(a).unwrap();
                    reward += s.reward;
                    kills += s.kills;
                    deaths += s.deaths;
                    let done = s.done;
                    last = Some(s);
                    if done {
                        break;
                    }
                }
                let last = last.unwrap();
                assert_eq!(r.reward, reward);
                assert_eq!((r.kills, r.deaths), (kills, deaths));
                assert_eq!(r.observation, last.observation);
                assert_eq!(r.done, last.done);
                assert_eq!(env.render_ascii(), manual.render_ascii());
                assert_eq!(env.tic(), manual.tic());
            }
        }
    }
}

#[test]
fn gridbasic_returns_match_event_accounting_and_bounds() {
    let mut rng = rng_from_seed(3);
    for seed in 0..200 {
        let mut env = GridBasic::new(GridBasicConfig::default()).unwrap();
        env.reset(seed);
        let (mut ret, mut tics, mut misses, mut kills) = (0.0, 0, 0, 0);
        while !env.is_done() {
            let a = rng.gen_range(0..3);
            let aligned = env.agent_col() == env.monster_col();
            let r = env.step(a).unwrap();
            ret += r.reward;
            tics += 1;
            if a == SHOOT && !aligned {
                misses += 1;
            }
            kills += r.kills;
        }
        let accounted = -(tics as f64) - 5.0 * misses as f64 + 101.0 * kills as f64;
        assert_eq!(ret, accounted);
        assert!((-(300.0 + 5.0 * 300.0)..=100.0).contains(&ret));
    }
}

#[test]
fn gridbasic_expert_is_optimal_when_aligned() {
    let mut rng = rng_from_seed(0);
    let mut sum = 0.0;
    let n = 2000;
    for seed in 0..n {
        let mut env = GridBasic::new(GridBasicConfig::default()).unwrap();
        let mut obs = env.reset(seed);
        let dist = (env.monster_col() as f64 - 5.0).abs();
        let mut ret = 0.0;
        let mut expert = GridBasicExpert;
        while !env.is_done() {
            let a = expert.act(&obs, &mut rng).unwrap();
            let r = frame_skip_step(&mut env, a, 4).unwrap();
            ret += r.reward;
            obs = r.observation;
        }
        assert_eq!(ret, 100.0 - 5.0 * dist);
        sum += ret;
    }
    // E|m - 5| for m uniform on 0..11 is 30/11
    let mean = sum / n as f64;
    assert!((mean - (100.0 - 5.0 * 30.0 / 11.0)).abs() < 1.0, "{mean}");
}

#[test]
fn hallway_cue_only_at_start() {
    let cfg = HallwayConfig::default();
    let mut seen = [false; 2];
    for seed in 0..50 {
        let mut env = Hallway::new(cfg.clone()).unwrap();
        let obs = env.reset(seed);
        seen[env.goal_up() as usize] = true;
        let cue = obs.cells(1);
        assert_eq!(cue, vec![(if env.goal_up() { 0 } else { 2 }, 0)]);
        // goal cells carry no marker in any plane
        for c in 0..3 {
            for row in [0, 2] {
                assert_eq!(obs.get(c, row, cfg.length - 1), 0.0);
            }
        }
        let mut twin = Hallway::new(cfg.clone()).unwrap();
        let mut twin_seed = seed + 1;
        while {
            twin.reset(twin_seed);
            twin.goal_up() == env.goal_up()
        } {
            twin_seed += 1;
        }
        for _ in 0..cfg.length + 2 {
            let a = env.step(0).unwrap().observation;
            let b = twin.step(0).unwrap().observation;
            assert!(a.cells(1).is_empty());
            assert_eq!(a, b);
        }
    }
    assert_eq!(seen, [true, true]);
}

#[test]
fn hallway_oracle_always_succeeds() {
    let mut rng = rng_from_seed(0);
    for k in [0, 4] {
        for seed in 0..40 {
            let mut env = Hallway::new(HallwayConfig::default()).unwrap();
            let mut obs = env.reset(seed);
            let mut oracle = HallwayOracle::default();
            let mut ret = 0.0;
            while !env.is_done() {
                let a = oracle.act(&obs, &mut rng).unwrap();
                let r = frame_skip_step(&mut env, a, k).unwrap();
                ret += r.reward;
                obs = r.observation;
            }
            assert_eq!(ret, 1.0);
        }
    }
}

#[test]
fn hallway_wrong_goal_pays_nothing() {
    let mut env = Hallway::new(HallwayConfig::default()).unwrap();
    env.reset(5);
    for _ in 0..5 {
        env.step(0).unwrap();
    }
    let wrong = if env.goal_up() { 2 } else { 1 };
    let r = env.step(wrong).unwrap();
    assert_eq!((r.reward, r.done, r.timed_out), (0.0, true, false));
}

fn quiet_deathmatch() -> MiniDeathmatch {
    let mut env = MiniDeathmatch::new(DeathmatchConfig {
        enemy_shoot_prob: 0.0,
        enemy_move_prob: 0.0,
        ..DeathmatchConfig::default()
    })
    .unwrap();
    env.reset(0);
    env
}

#[test]
fn deathmatch_features() {
    let mut env = MiniDeathmatch::new(DeathmatchConfig::default()).unwrap();
    env.reset(11);
    assert_eq!(env.features().health, 1.0);

    let mut env = quiet_deathmatch();
    let before = env.features().ammo;
    env.step(DM_SHOOT).unwrap();
    let after = env.features().ammo;
    assert!((before - after - 1.0 / 50.0).abs() < 1e-12);
}

#[test]
fn deathmatch_vision_cone() {
    let mut env = quiet_deathmatch();
    env.place_agent((4, 4), 0).unwrap();
    // facing north: behind the agent is out of the cone
    env.place_enemy(0, (6, 4)).unwrap();
    env.place_enemy(1, (7, 1)).unwrap();
    env.place_enemy(2, (7, 7)).unwrap();
    assert_eq!(env.features().enemies, 0.0);
    assert!(env.observe().cells(1).is_empty());

    env.place_enemy(0, (2, 4)).unwrap();
    assert!((env.features().enemies - 1.0 / 3.0).abs() < 1e-12);
    // two ahead, straight on: row depth-2, centre column
    assert_eq!(env.observe().cells(1), vec![(2, 4)]);
    assert_eq!(env.observe().cells(2), vec![(4, 4)]);
}

#[test]
fn deathmatch_kill_and_wasted_shot() {
    let mut env = quiet_deathmatch();
    env.place_agent((4, 4), 0).unwrap();
    env.place_enemy(0, (2, 4)).unwrap();
    env.place_enemy(1, (7, 1)).unwrap();
    env.place_enemy(2, (7, 7)).unwrap();
    let r = env.step(DM_SHOOT).unwrap();
    assert_eq!((r.reward, r.kills), (1.0, 1));
    let r = env.step(DM_SHOOT).unwrap();
    assert_eq!(r.reward, -0.02);
    assert_eq!(env.kills_deaths(), (1, 0));
}

#[test]
fn deathmatch_damage_and_death() {
    let mut env = MiniDeathmatch::new(DeathmatchConfig {
        enemy_shoot_prob: 1.0,
        enemy_move_prob: 0.0,
        enemies: 1,
        health_packs: 0,
        ammo_packs: 0,
        ..DeathmatchConfig::default()
    })
    .unwrap();
    env.reset(0);
    env.place_agent((4, 4), 1).unwrap();
    env.place_enemy(0, (1, 4)).unwrap();
    let r = env.step(4).unwrap();
    assert!((r.reward - (-0.5)).abs() < 1e-12);
    assert_eq!(env.health(), 90);
    let mut deaths = 0;
    let mut total = r.reward;
    for _ in 0..9 {
        env.place_agent((4, 4), 1).unwrap();
        let r = env.step(4).unwrap();
        deaths += r.deaths;
        total += r.reward;
    }
    assert_eq!(deaths, 1);
    assert!((total - (-5.0 - 1.0)).abs() < 1e-9);
    assert_eq!(env.health(), 100);
    assert_eq!(env.ammo(), 20);
}

#[test]
fn deathmatch_runs_to_cap() {
    let mut env = MiniDeathmatch::new(DeathmatchConfig::default()).unwrap();
    env.reset(5);
    let mut rng = rng_from_seed(5);
    let mut steps = 0;
    while !env.is_done() {
        let a = rng.gen_range(0..5);
        let r = frame_skip_step(&mut env, a, 4).unwrap();
        assert!(r.observation.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        let f = r.features.to_array();
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        steps += 1;
    }
    assert_eq!(steps, 200);
    assert_eq!(env.tic(), 1000);
    let _ = (TURN_LEFT, DM_FORWARD);
}

#[test]
fn render_ascii_marks() {
    let mut env = GridBasic::new(GridBasicConfig::default()).unwrap();
    env.reset(0);
    let a = env.render_ascii();
    assert_eq!(a, env.render_ascii());
    assert_eq!(a.matches('@').count(), 1);
    assert_eq!(a.matches('M').count(), 1);
    assert_eq!(a.lines().count(), 3);
    assert!(a.lines().all(|l| l.chars().count() == 11));

    let env = quiet_deathmatch();
    let s = env.render_ascii();
    assert_eq!(s.matches('@').count(), 1);
    assert_eq!(s.matches('M').count(), 3);
    assert_eq!(s, env.render_ascii());
}

#[test]
fn env_kind_parsing() {
    for k in [EnvKind::GridBasic, EnvKind::MiniDeathmatch, EnvKind::Hallway] {
        assert_eq!(k.tag().parse::<EnvKind>().unwrap(), k);
    }
    assert!("doom".parse::<EnvKind>().is_err());
    let bad = EnvConfig {
        kind: EnvKind::Hallway,
        hallway: HallwayConfig {
            length: 1,
            ..HallwayConfig::default()
        },
        ..EnvConfig::default()
    };
    assert!(bad.build().is_err());
}
