use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autocompress")).args(args).current_dir(dir).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = "classes = 4\nsynth_train = 200\nsynth_test = 100\nbaseline_epochs = 1\nrounds = 1\n\
admm_iterations = 2\nretrain_epochs = 1\nsa_iters = 2\nsa_stop_ratio = 0.3\nsa_warmup = 4\nacc_floor = 0\n";

#[test]
fn train_compress_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.txt"), CONFIG).unwrap();
    let o = bin(&["train", "--config", "c.txt", "--out", "b.acmp"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("baseline accuracy"));

    let o = bin(&["compress", "--config", "c.txt", "--init", "b.acmp", "--out-dir", "run"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("stop: Completed"));
    for f in ["checkpoint.acmp", "report.csv", "search-round1.csv"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    let o = bin(&["eval", "--config", "c.txt", "--checkpoint", "run/checkpoint.acmp"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("(matches report)"), "{}", stdout(&o));

    let from_csv = bin(&["report", "run/report.csv"], d);
    let from_ckpt = bin(&["report", "run/checkpoint.acmp"], d);
    assert!(from_csv.status.success() && from_ckpt.status.success());
    assert!(stdout(&from_csv).contains("purify"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.txt"), "bogus = 1\n").unwrap();
    let o = bin(&["train", "--config", "bad.txt"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    std::fs::write(d.join("c.txt"), CONFIG).unwrap();
    let o = bin(&["eval", "--config", "c.txt", "--checkpoint", "absent.acmp"], d);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.acmp"));

    std::fs::write(d.join("junk.acmp"), b"not a checkpoint").unwrap();
    let o = bin(&["eval", "--config", "c.txt", "--checkpoint", "junk.acmp"], d);
    assert_eq!(o.status.code(), Some(4));
}
