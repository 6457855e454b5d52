use std::fs;

use lfra::{Error, RunConfig};
use toml::{Table, Value};

fn flags(pairs: &[(&str, Value)]) -> Table {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

#[test]
fn defaults_resolve() {
    let cfg = RunConfig::resolve(Table::new(), None).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.lr, 0.002);
    assert_eq!(cfg.target_size().unwrap(), 512);
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(
        &file,
        "seed = 11\nlr = 0.01\n[model]\ndropout = 0.25\nchannels = [4, 8, 16]\n",
    )
    .unwrap();
    let cfg = RunConfig::resolve(
        flags(&[("seed", Value::Integer(3)), ("epochs", Value::Integer(4))]),
        Some(&file),
    )
    .unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.epochs, 4);
    assert_eq!(cfg.lr, 0.01);
    let m = cfg.model_config().unwrap();
    assert_eq!(m.dropout, 0.25);
    assert_eq!(m.channels, [4, 8, 16]);
    assert_eq!(m.seed, 11);
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::resolve(
        flags(&[("preset", Value::String("MLU".into())), ("seed", Value::Integer(5))]),
        None,
    )
    .unwrap();
    let text = cfg.effective_toml().unwrap();
    let file = dir.path().join("frozen.toml");
    fs::write(&file, &text).unwrap();
    let again = RunConfig::resolve(Table::new(), Some(&file)).unwrap();
    assert_eq!(again.model_config().unwrap(), cfg.model_config().unwrap());
    assert_eq!(again.effective_toml().unwrap(), text);
}

#[test]
fn bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    for text in [
        "colour = 1",
        "lr = -1.0",
        "threshold = 2.0",
        "dataset = \"nope\"",
        "[model]\nwidth = 3",
        "epochs = \"x\"",
    ] {
        fs::write(&file, text).unwrap();
        assert!(RunConfig::resolve(Table::new(), Some(&file)).is_err(), "{text}");
    }
    fs::write(&file, "not toml [").unwrap();
    assert!(matches!(
        RunConfig::resolve(Table::new(), Some(&file)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        RunConfig::resolve(Table::new(), Some(&dir.path().join("missing.toml"))),
        Err(Error::Io { .. })
    ));
}
