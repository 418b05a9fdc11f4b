use std::path::PathBuf;

use lamward::checkpoint::{bundle_from_container, decode, encode};
use lamward::config::RunConfig;
use lamward::controller::Controller;
use lamward::episode_io::{decode_dataset, decode_episode, encode_dataset, encode_episode, episode_from_text, episode_to_text};
use lamward::rng::Rng;
use lamward::sampler::SampleDump;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut seeds: Vec<Vec<u8>> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| std::fs::read(e.unwrap().path()).unwrap())
        .collect();
    assert!(!seeds.is_empty(), "no seeds for {target}");
    seeds.sort();
    seeds
}

/// Seeds plus byte flips, truncations, duplications and splices.
fn variants(target: &str, n: usize) -> Vec<Vec<u8>> {
    let seeds = corpus(target);
    let mut rng = Rng::new(99, target);
    let mut out = seeds.clone();
    for i in 0..n {
        let mut v = seeds[i % seeds.len()].clone();
        match rng.below(4) {
            0 => {
                for _ in 0..1 + rng.below(4) {
                    if !v.is_empty() {
                        let at = rng.below(v.len());
                        v[at] ^= 1 << rng.below(8);
                    }
                }
            }
            1 => v.truncate(rng.below(v.len() + 1)),
            2 => {
                let at = rng.below(v.len() + 1);
                let extra = v[at..].to_vec();
                v.extend_from_slice(&extra);
            }
            _ => {
                let other = &seeds[rng.below(seeds.len())];
                let cut = rng.below(v.len() + 1).min(other.len());
                v.truncate(cut);
                v.extend_from_slice(&other[cut..]);
            }
        }
        out.push(v);
    }
    out
}

#[test]
fn binary_episodes_survive_mutation() {
    let mut decoded = 0;
    for bytes in variants("episode", 400) {
        if let Ok(ep) = decode_episode(&bytes) {
            ep.check().unwrap();
            let again = encode_episode(&ep);
            assert_eq!(encode_episode(&decode_episode(&again).unwrap()), again);
            decoded += 1;
        }
    }
    assert!(decoded >= 4);
    for bytes in variants("dataset", 200) {
        if let Ok(eps) = decode_dataset(&bytes) {
            let again = encode_dataset(&eps);
            assert_eq!(encode_dataset(&decode_dataset(&again).unwrap()), again);
        }
    }
}

#[test]
fn episode_text_survives_mutation() {
    for bytes in variants("episode_text", 400) {
        let Ok(text) = std::str::from_utf8(&bytes) else { continue };
        if let Ok(ep) = episode_from_text(text) {
            let printed = episode_to_text(&ep);
            assert_eq!(episode_to_text(&episode_from_text(&printed).unwrap()), printed);
        }
    }
}

#[test]
fn checkpoints_survive_mutation() {
    let mut bundles = 0;
    for bytes in variants("checkpoint", 400) {
        if let Ok(c) = decode(&bytes) {
            let again = encode(&c);
            assert_eq!(encode(&decode(&again).unwrap()), again);
            bundles += bundle_from_container(&c).is_ok() as usize;
            let _ = Controller::from_container(&c);
        }
    }
    assert!(bundles >= 4);
}

#[test]
fn run_configs_survive_mutation() {
    for bytes in variants("run_config", 400) {
        let Ok(text) = std::str::from_utf8(&bytes) else { continue };
        if let Ok(cfg) = RunConfig::from_toml(text) {
            let canonical = cfg.to_toml();
            assert_eq!(RunConfig::from_toml(&canonical).unwrap().to_toml(), canonical);
        }
    }
}

#[test]
fn sample_dumps_survive_mutation() {
    for bytes in variants("sample_dump", 300) {
        if let Ok(d) = SampleDump::decode(&bytes) {
            let again = d.encode();
            assert_eq!(SampleDump::decode(&again).unwrap().encode(), again);
        }
    }
}
