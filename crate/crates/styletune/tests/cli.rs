//! End-to-end checks of the command-line pipelines: exit codes, resolved
//! config echoes, and bit-exact re-runs from an emitted config.

use std::path::Path;
use styletune::cli;

fn styletune(args: &[&str]) -> i32 {
    let mut argv = vec!["styletune".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    cli::run(argv)
}

fn tiny_train_args<'a>(extra: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut args = vec![
        "--resolution",
        "8",
        "--w-dim",
        "8",
        "--steps",
        "2",
        "--batch",
        "2",
        "--dataset-count",
        "8",
        "--structure-layers",
        "2",
        "--seed",
        "3",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn pipeline_roundtrip_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap().to_string();

    // pretrain
    let pre_out = format!("{root}/pre");
    let mut args = vec!["pretrain"];
    let tail = tiny_train_args(&[], &pre_out);
    args.extend(tail.iter());
    assert_eq!(styletune(&args), 0);
    let source = format!("{pre_out}/snapshots/step_2.ckpt");
    assert!(Path::new(&format!("{pre_out}/config.json")).exists());
    assert!(Path::new(&format!("{pre_out}/log.jsonl")).exists());

    // finetune with the structure-loss recipe flags
    let ft_out = format!("{root}/ft");
    let mut args = vec!["finetune"];
    let tail = tiny_train_args(
        &[
            "--source",
            &source,
            "--freeze-mode",
            "none",
            "--lambda-structure",
            "1",
        ],
        &ft_out,
    );
    args.extend(tail.iter());
    assert_eq!(styletune(&args), 0);

    // re-run from the emitted config into a fresh directory: bit-identical log
    let cfg_path = format!("{ft_out}/config.json");
    let rerun_out = format!("{root}/ft_rerun");
    let cfg_text = std::fs::read_to_string(&cfg_path).unwrap();
    let rerun_cfg_path = format!("{root}/rerun_config.json");
    std::fs::write(
        &rerun_cfg_path,
        cfg_text.replace(&ft_out, &rerun_out),
    )
    .unwrap();
    assert_eq!(styletune(&["finetune", "--config", &rerun_cfg_path]), 0);
    let log_a = std::fs::read(format!("{ft_out}/log.jsonl")).unwrap();
    let log_b = std::fs::read(format!("{rerun_out}/log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "re-run from emitted config must reproduce the log");

    // verify on the finetune run dir
    assert_eq!(styletune(&["verify", "--run", &ft_out]), 0);

    // swap + grid
    let target = format!("{ft_out}/snapshots/step_2.ckpt");
    let swap_out = format!("{root}/swap");
    assert_eq!(
        styletune(&[
            "swap", "--source", &source, "--target", &target, "--boundary", "8", "--out",
            &swap_out,
        ]),
        0
    );
    let swapped = format!("{swap_out}/swapped.ckpt");
    assert!(Path::new(&format!("{swap_out}/config.json")).exists());
    let grid_out = format!("{root}/grid");
    let ckpts = format!("{source},{swapped},{target}");
    assert_eq!(
        styletune(&["grid", "--ckpt", &ckpts, "--seed", "1,2", "--out", &grid_out]),
        0
    );
    let grid = image::open(format!("{grid_out}/grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (24, 16)); // 3 ckpts x 2 seeds at 8px

    // generate
    let gen_out = format!("{root}/gen");
    assert_eq!(
        styletune(&["generate", "--ckpt", &target, "--seed", "7", "--out", &gen_out]),
        0
    );
    assert!(Path::new(&format!("{gen_out}/seed_7.png")).exists());

    // edit with a derived direction
    let edit_out = format!("{root}/edit");
    assert_eq!(
        styletune(&[
            "edit", "--ckpt", &target, "--alpha", "0", "--alpha", "2", "--out", &edit_out,
        ]),
        0
    );
    assert!(Path::new(&format!("{edit_out}/alpha_+2.00.png")).exists());

    // sweep-swap emits one grid per ladder boundary (4, 8, 16 for res 8)
    let sweep_out = format!("{root}/sweep");
    assert_eq!(
        styletune(&[
            "sweep-swap", "--source", &source, "--target", &target, "--seed", "1", "--out",
            &sweep_out,
        ]),
        0
    );
    for b in [4, 8, 16] {
        assert!(Path::new(&format!("{sweep_out}/boundary_{b}/grid.png")).exists());
    }

    // exit codes: unknown flag is rejected (2), missing checkpoint is 3/4 class
    let mut args = vec!["pretrain", "--definitely-not-a-flag"];
    let tail = tiny_train_args(&[], &pre_out);
    args.extend(tail.iter());
    assert_eq!(styletune(&args), 2);
    assert_eq!(
        styletune(&["generate", "--ckpt", "/nope/missing.ckpt", "--out", &gen_out]),
        4
    );

    // incompatible checkpoints -> exit 3
    let other_out = format!("{root}/pre16");
    assert_eq!(
        styletune(&[
            "pretrain",
            "--resolution",
            "16",
            "--w-dim",
            "8",
            "--steps",
            "1",
            "--batch",
            "2",
            "--dataset-count",
            "8",
            "--structure-layers",
            "2",
            "--seed",
            "3",
            "--out",
            &other_out,
        ]),
        0
    );
    let other = format!("{other_out}/snapshots/step_1.ckpt");
    assert_eq!(
        styletune(&[
            "swap", "--source", &source, "--target", &other, "--boundary", "8", "--out",
            &format!("{root}/swap_bad"),
        ]),
        3
    );

    // config parse error -> exit 2
    let bad_cfg = format!("{root}/bad.json");
    std::fs::write(&bad_cfg, "{ not json").unwrap();
    assert_eq!(styletune(&["pretrain", "--config", &bad_cfg]), 2);
}
