use std::fs;
use std::path::Path;
use std::process::Command;

use c2vae::data::FactorDataset;
use c2vae::training::{StepLog, TrainConfig, STEP_LOG_HEADER};
use c2vae_cli::pgm::{decode_pgm, SEPARATOR};
use c2vae_cli::*;

const BIN: &str = env!("CARGO_BIN_EXE_c2vae");

fn tiny_data(dir: &Path) -> FactorDataset {
    gen_data(&GenDataArgs { shapes: 2, scales: 2, pos_x: 3, pos_y: 3, ..GenDataArgs::default() }, dir).unwrap()
}

fn tiny_overrides(steps: usize) -> Vec<String> {
    [
        format!("steps={steps}"),
        "batch_size=8".into(),
        "latent_dim=3".into(),
        "enc_hidden=16".into(),
        "dec_hidden=16".into(),
        "cls_hidden=16,16".into(),
        "lr_vae=1e-3".into(),
    ]
    .to_vec()
}

fn tiny_cfg(steps: usize) -> TrainConfig {
    load_config(None, &tiny_overrides(steps)).unwrap()
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

#[test]
fn gen_data_defaults_and_byte_identical_reruns() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pa, pb) = (a.path().to_str().unwrap(), b.path().to_str().unwrap());
    let (code, stdout, _) = cli(&["gen-data", "--out", pa]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("768 images"), "{stdout}");
    assert_eq!(cli(&["gen-data", "--out", pb]).0, 0);
    for f in ["images.ctf", "factors.ctf", "manifest.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(FactorDataset::load(a.path()).unwrap().len(), 768);
}

#[test]
fn invalid_cardinality_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let (code, _, stderr) = cli(&["gen-data", "--out", d.path().to_str().unwrap(), "--pos-x", "1"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("posX"), "{stderr}");
    assert_eq!(cli(&["gen-data"]).0, 2);
}

#[test]
fn train_writes_curves_checkpoints_and_manifest() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(&root.path().join("data"));
    let out = root.path().join("run");
    let cfg = TrainConfig { checkpoint_every: 5, ..tiny_cfg(12) };
    let (model, logs) = train_run(&cfg, &data, &out).unwrap();
    assert_eq!(logs.len(), 12);

    let curves = fs::read_to_string(out.join(CURVES_FILE)).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next(), Some(STEP_LOG_HEADER));
    let parsed: Vec<StepLog> = lines.map(|l| StepLog::parse_csv_row(l).unwrap()).collect();
    assert_eq!(parsed, logs);

    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.status, "ok");
    assert!(m.finished_unix >= m.started_unix);
    for f in &m.outputs {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(m.outputs.contains(&checkpoint_name(5)) && m.outputs.contains(&checkpoint_name(10)));
    let ckpt = open_checkpoint(&out.join(FINAL_CHECKPOINT), &data).unwrap();
    assert_eq!(ckpt.model, model);
    assert_eq!(ckpt.step, 12);
    assert_eq!(TrainConfig::parse_text(&fs::read_to_string(out.join(CONFIG_FILE)).unwrap()).unwrap().echo(), cfg.echo());
}

#[test]
fn train_command_line_and_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_data(&data);
    let cfg_file = root.path().join("run.cfg");
    fs::write(&cfg_file, "# beta-VAE baseline\nmode=beta_vae\nbeta=4\n").unwrap();
    let out = root.path().join("run");
    let mut args: Vec<String> = ["train", "--config", cfg_file.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]
        .map(String::from)
        .to_vec();
    for s in tiny_overrides(4) {
        args.extend(["--set".to_string(), s]);
    }
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, _, stderr) = cli(&argv);
    assert_eq!(code, 0, "{stderr}");
    let echo = fs::read_to_string(out.join(CONFIG_FILE)).unwrap();
    assert!(echo.contains("mode=beta_vae") && echo.contains("beta=4") && echo.contains("steps=4"));

    let (code, _, stderr) = cli(&["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--set", "gama=1"]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("gama"));
    let (code, _, _) = cli(&["train", "--data", root.path().join("none").to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn divergence_exits_3_with_the_step() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    tiny_data(&data);
    let out = root.path().join("run");
    let mut args: Vec<String> = ["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()].map(String::from).to_vec();
    for s in tiny_overrides(200).into_iter().chain(["lr_vae=1e300".to_string()]) {
        args.extend(["--set".to_string(), s]);
    }
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let (code, _, stderr) = cli(&argv);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("diverged at step"), "{stderr}");
    let m = RunManifest::load(&out).unwrap();
    assert!(m.status.starts_with("failed"));
    assert!(!m.outputs.contains(&FINAL_CHECKPOINT.to_string()));
}

#[test]
fn eval_rows_seeds_and_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("data");
    let data = tiny_data(&data_dir);
    let out = root.path().join("run");
    train_run(&tiny_cfg(10), &data, &out).unwrap();
    let ckpt = out.join(FINAL_CHECKPOINT);
    let args = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data_dir.to_str().unwrap()];
    let (code, once, stderr) = cli(&args);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(once.lines().count(), 2);
    assert_eq!(cli(&args).1, once);

    let mut five = args.to_vec();
    five.extend(["--seeds", "5"]);
    let (_, rows, _) = cli(&five);
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines.len(), 1 + 5 + 1);
    assert!(lines[6].starts_with("mean±std,"));
    assert_eq!(lines[1], once.lines().nth(1).unwrap());

    let (code, _, _) = cli(&["eval", "--checkpoint", root.path().join("missing.ckpt").to_str().unwrap(), "--data", data_dir.to_str().unwrap()]);
    assert_eq!(code, 2);
    let big = root.path().join("big");
    gen_data(&GenDataArgs { resolution: 20, shapes: 1, scales: 2, pos_x: 2, pos_y: 2, ..GenDataArgs::default() }, &big).unwrap();
    let (code, _, stderr) = cli(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", big.to_str().unwrap()]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn traversal_grid_and_identity_step() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(&root.path().join("data"));
    let run = root.path().join("run");
    let (model, _) = train_run(&tiny_cfg(5), &data, &run).unwrap();

    let single = TraverseArgs { anchor: 4, dims: vec![1], steps: 1, range: 3.0 };
    let rows = traversal(&model, &data, &single).unwrap();
    let mu = model.encode(data.image(4)).unwrap().mu;
    let recon = model.decode(&mu).unwrap();
    for (p, l) in rows[0][0].iter().zip(&recon) {
        assert!((p - c2vae::tensor::sigmoid(*l)).abs() < 1e-12);
    }

    let out = root.path().join("trav");
    let files = traverse_run(&model, &data, &TraverseArgs { anchor: 0, dims: vec![], steps: 4, range: 2.0 }, &out).unwrap();
    assert_eq!(files.len(), 3 * 4 + 1);
    let (w, h, px) = decode_pgm(&fs::read(out.join(GRID_FILE)).unwrap()).unwrap();
    assert_eq!((w, h), (4 * 16 + 3, 3 * 16 + 2));
    assert!((0..h).all(|y| px[y * w + 16] == SEPARATOR));
    let (cw, ch, cell) = decode_pgm(&fs::read(out.join("traverse_d2_s3.pgm")).unwrap()).unwrap();
    assert_eq!((cw, ch), (16, 16));
    for y in 0..16 {
        let off = (2 * 17 + y) * w + 3 * 17;
        assert_eq!(&px[off..off + 16], &cell[y * 16..(y + 1) * 16]);
    }
    let again = root.path().join("trav2");
    traverse_run(&model, &data, &TraverseArgs { anchor: 0, dims: vec![], steps: 4, range: 2.0 }, &again).unwrap();
    assert_eq!(fs::read(out.join(GRID_FILE)).unwrap(), fs::read(again.join(GRID_FILE)).unwrap());

    assert!(matches!(traversal(&model, &data, &TraverseArgs { anchor: 0, dims: vec![3], steps: 2, range: 1.0 }), Err(CliError::Usage(_))));
    assert!(traversal(&model, &data, &TraverseArgs { anchor: data.len(), dims: vec![], steps: 2, range: 1.0 }).is_err());
}

#[test]
fn traversal_offsets_are_symmetric() {
    assert_eq!(traversal_offsets(1, 5.0), vec![0.0]);
    assert_eq!(traversal_offsets(5, 2.0), vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
}

#[test]
fn sweep_rows_follow_the_gammas_with_na_for_failures() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(&root.path().join("data"));
    let out = root.path().join("sweep");
    let base = TrainConfig { lr_vae: 1e300, ..tiny_cfg(30) };
    let bad = sweep_gamma(&base, &data, &[0.0, 2.0], &out, 2).unwrap();
    assert_eq!(bad.header, vec!["gamma", "SAP", "KL", "recon"]);
    assert_eq!(bad.rows.len(), 2);
    assert!(bad.rows.iter().all(|r| r[1..] == [NA, NA, NA]));

    let good = sweep_gamma(&tiny_cfg(6), &data, &[3.0], &out, 1).unwrap();
    assert_eq!(good.rows.len(), 1);
    let run = out.join("gamma_3");
    let ckpt = open_checkpoint(&run.join(FINAL_CHECKPOINT), &data).unwrap();
    let report = eval_model(&ckpt.model, &data, 1, tiny_cfg(6).seed).unwrap()[0].1;
    assert_eq!(good.rows[0], vec!["3".to_string(), report.sap.to_string(), report.kl.to_string(), report.recon.to_string()]);
    assert_eq!(Table::parse(&fs::read_to_string(out.join(SWEEP_FILE)).unwrap()).unwrap(), good);
    for f in RunManifest::load(&out).unwrap().outputs {
        assert!(out.join(&f).is_file(), "{f}");
    }
    assert!(sweep_gamma(&tiny_cfg(1), &data, &[-1.0], &out, 1).is_err());
}

#[test]
fn ablation_table_schema_and_shared_data_seed() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(&root.path().join("data"));
    let out = root.path().join("abl");
    let table = ablate(&tiny_cfg(4), &data, &out, 1).unwrap();
    assert_eq!(table.header, vec!["metric", "C2VAE-G", "C2VAE-I", "C2VAE-S", "C2VAE-M"]);
    assert_eq!(table.rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), vec!["SAP", "KL", "recon"]);
    assert!(table.rows.iter().all(|r| r[1..].iter().all(|c| c.parse::<f64>().is_ok())));
    let text = fs::read_to_string(out.join(ABLATION_FILE)).unwrap();
    assert_eq!(Table::parse(&text).unwrap().to_csv(), text);
    let seeds: Vec<String> = ABLATION_VARIANTS
        .iter()
        .map(|(n, _)| {
            let echo = fs::read_to_string(out.join(n).join(CONFIG_FILE)).unwrap();
            echo.lines().find(|l| l.starts_with("data_seed=")).unwrap().to_string()
        })
        .collect();
    assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    let sources: Vec<String> = ABLATION_VARIANTS
        .iter()
        .map(|(n, _)| fs::read_to_string(out.join(n).join(CONFIG_FILE)).unwrap().lines().find(|l| l.starts_with("negative_source=")).unwrap().to_string())
        .collect();
    assert_eq!(sources, ["copula_gaussian", "permute", "copula_student", "copula_gmm"].map(|s| format!("negative_source={s}")));
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let root = tempfile::tempdir().unwrap();
    let data = tiny_data(&root.path().join("data"));
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    train_run(&tiny_cfg(8), &data, &a).unwrap();
    train_run(&tiny_cfg(8), &data, &b).unwrap();
    for f in [CURVES_FILE, FINAL_CHECKPOINT, CONFIG_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn table_parse_rejects_ragged_rows() {
    assert!(Table::parse("a,b\n1\n").is_err());
    assert!(Table::parse("").is_err());
}
