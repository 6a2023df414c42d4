use mfb_cli::{CliError, RunConfig, Sweep};
use mfb_core::model::FusionKind;

#[test]
fn emit_parse_round_trip() {
    let mut cfg = RunConfig::default();
    cfg.fusion = FusionKind::Mcb;
    cfg.sweep = Sweep::Norms;
    cfg.lr = 0.1 + 0.2;
    cfg.l2_norm = false;
    cfg.bench_grid = "mfb:3:4:2:5;mcb:3:4:11".parse().unwrap();
    let text = cfg.emit();
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    assert_eq!(RunConfig::parse(&text).unwrap().emit(), text);
}

#[test]
fn emission_is_canonical_and_complete() {
    let scrambled = "iters = 7\n# comment line\nseed = 3   # trailing comment\n\n";
    let text = RunConfig::parse(scrambled).unwrap().emit();
    let keys: Vec<&str> = text
        .lines()
        .map(|l| l.split(" = ").next().unwrap())
        .collect();
    assert_eq!(keys, RunConfig::KEYS);
    assert!(text.contains("seed = 3\n") && text.contains("iters = 7\n"));
}

#[test]
fn unknown_keys_and_bad_values_rejected() {
    for text in [
        "colour = 3",
        "iters = -1",
        "arch = transformer",
        "no equals sign",
        "l2_norm = maybe",
    ] {
        assert!(
            matches!(RunConfig::parse(text), Err(CliError::Config(_))),
            "{text}"
        );
    }
}

#[test]
fn later_lines_override_earlier() {
    let cfg = RunConfig::parse("k = 2\nk = 4").unwrap();
    assert_eq!(cfg.k, 4);
}
