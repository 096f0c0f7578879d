use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use diaruq_cli::container::{Container, Kind, Metadata};
use ndarray::{ArrayD, IxDyn};

const SYNTH: &str = r#"
[synth]
frames = 400
speakers = 3
draws = 16
p_flip = 0.0
jitter = 0.0
epistemic_spread = 0.0
seed = 11
"#;

fn diaruq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diaruq")).current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_data(dir: &Path) {
    fs::write(dir.join("synth.toml"), SYNTH).unwrap();
    let o = diaruq(dir, &["synth", "--spec", "synth.toml", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn container_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f32> = (0..2 * 3 * 5).map(|i| (i as f32 * 0.37).sin() * 1e-3 + f32::EPSILON).collect();
    let c = Container {
        kind: Kind::Samples,
        data: ArrayD::from_shape_vec(IxDyn(&[2, 5, 3]), values).unwrap(),
        meta: Metadata { frame_spec: None, speaker_order: vec!["a".into(), "b".into(), "c".into()], model_id: "m".into() },
    };
    let path = dir.path().join("x.duqs");
    c.write(&path).unwrap();
    let back = Container::read(&path).unwrap();
    assert_eq!(back.kind, Kind::Samples);
    assert_eq!(back.data.shape(), c.data.shape());
    assert!(back.data.iter().zip(c.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.meta, c.meta);
}

#[test]
fn truncated_container_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    synth_data(dir.path());
    let bytes = fs::read(dir.path().join("data/model0.duqs")).unwrap();
    fs::write(dir.path().join("cut.duqs"), &bytes[..bytes.len() - 7]).unwrap();
    let o = diaruq(dir.path(), &["aggregate", "cut.duqs", "--out", "agg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("format"), "{}", stderr(&o));
    assert!(!dir.path().join("agg").exists());
}

#[test]
fn run_on_clean_synth_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    synth_data(dir.path());
    for reseg in ["none", "smooth", "kalman"] {
        let cfg = format!(
            "resegmentation = \"{reseg}\"\n[paths]\nsamples = [\"data/model0.duqs\"]\ntruth = \"data/truth.csv\"\nout_dir = \"out-{reseg}\"\n"
        );
        fs::write(dir.path().join("run.toml"), cfg).unwrap();
        let o = diaruq(dir.path(), &["run", "run.toml"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        if reseg == "none" {
            let v = json(&o);
            assert_eq!(v["frame"]["der_pct"], 0.0);
            assert_eq!(v["time"]["der_pct"], 0.0);
        }
        for f in ["predictions.csv", "predictions.rttm", "score.json", "entropy.csv", "calibration.csv"] {
            assert!(dir.path().join(format!("out-{reseg}")).join(f).exists(), "{reseg}: {f}");
        }
    }
}

#[test]
fn missing_input_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    synth_data(dir.path());
    fs::write(
        dir.path().join("run.toml"),
        "[paths]\nsamples = [\"data/model0.duqs\", \"data/absent.duqs\"]\ntruth = \"data/truth.csv\"\nout_dir = \"out\"\n",
    )
    .unwrap();
    let o = diaruq(dir.path(), &["run", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.duqs"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn malformed_toml_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "lambda = 0.5\ngap = [\n").unwrap();
    let o = diaruq(dir.path(), &["run", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("column"), "{err}");
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "lamda = 0.5\n[paths]\nsamples = []\ntruth = \"t\"\nout_dir = \"o\"\n").unwrap();
    let o = diaruq(dir.path(), &["run", "run.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"));

    fs::write(dir.path().join("s.toml"), "[synth]\nframez = 3\n").unwrap();
    let o = diaruq(dir.path(), &["synth", "--spec", "s.toml", "--out", "d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("framez"));
}

#[test]
fn score_rttm_with_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("truth.csv"), "speaker,start_s,end_s\nA,0,4\nB,3,8\n").unwrap();
    fs::write(
        d.join("pred.rttm"),
        "SPEAKER f 1 0.000 4.000 <NA> <NA> x <NA> <NA>\nSPEAKER f 1 3.000 2.000 <NA> <NA> y <NA> <NA>\n",
    )
    .unwrap();
    let o = diaruq(d, &["score", "--truth", "truth.csv", "--pred", "pred.rttm", "--permute", "--out", "r/score.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    // 3 s of B missed out of 9 s of reference speech
    let der = v["time"]["der_pct"].as_f64().unwrap();
    assert!((der - 100.0 / 3.0).abs() < 1e-9, "{der}");
    assert!(d.join("r/score.json").exists());
}

#[test]
fn stats_counts_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("u.csv"), "speaker,start_s,end_s\nA,0,2\nB,1,3\nA,5,6\n").unwrap();
    let o = diaruq(d, &["stats", "u.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = json(&o);
    assert_eq!(v[0]["utterances"], 3);
    assert!((v[0]["combined_speech_s"].as_f64().unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn kalman_fuse_and_report_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_data(d);
    let o = diaruq(d, &["fuse", "data/model0.duqs", "data/model0.duqs", "--out", "fu"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("fu/predictions.rttm").exists());
    let o = diaruq(d, &["report", "data/model0.duqs", "--truth", "data/truth.csv", "--out", "rep", "--svg"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(d.join("rep/entropy.svg")).unwrap().starts_with("<svg"));
    let o = diaruq(d, &["score", "--truth", "data/truth.csv", "--pred", "fu/predictions.csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&o)["frame"]["der_pct"], 0.0);
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("u.csv"), "speaker,start_s,end_s\nA,0,1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_diaruq"))
        .current_dir(dir.path())
        .env("DIARUQ_THREADS", "0")
        .args(["stats", "u.csv"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
