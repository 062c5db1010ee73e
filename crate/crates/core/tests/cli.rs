use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const CORPUS: &str = "\
the minister met the delegation in paris on monday
the delegation from berlin arrived in paris late on sunday
officials said the talks in rome would resume on friday
the mayor of rome met officials from madrid
a spokesman for the ministry said the meeting went well
the minister said the ministry would publish the report";

const DOCS: &str = r#"{"id":"a","text":"the minister met the delegation in paris","spans":[[4,12,"PER"],[35,40,"LOC"]]}
{"id":"b","text":"officials said the talks in rome would resume","spans":[[28,32,"LOC"]]}
{"id":"c","text":"nothing to hide","spans":[]}
"#;

fn ndd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ndd"))
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), CORPUS).unwrap();
    std::fs::write(dir.path().join("docs.jsonl"), DOCS).unwrap();
    dir
}

fn run(dir: &Path, args: &[&str]) -> Output {
    ndd().args(args).current_dir(dir).output().unwrap()
}

fn records(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn texts(path: &Path) -> Vec<String> {
    records(path).iter().map(|r| r["text"].as_str().unwrap().to_owned()).collect()
}

#[test]
fn generative_run_keeps_unannotated_text() {
    let dir = fixture();
    let out = run(dir.path(), &["distort", "docs.jsonl", "-o", "out.jsonl", "--backend-reference", "corpus.txt"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = records(&dir.path().join("out.jsonl"));
    assert_eq!(recs.len(), 3);
    assert_eq!(recs[2]["text"], "nothing to hide");
    let t = recs[0]["text"].as_str().unwrap();
    assert!(t.starts_with("the "), "{t}");
    assert!(t.contains(" met the delegation in "), "{t}");
    assert_eq!(recs[0]["audit"][0]["original"], "minister");
    assert_eq!(recs[0]["audit"][1]["original"], "paris");
    let chars: Vec<char> = t.chars().collect();
    let s = &recs[0]["spans"][0];
    let (a, b) = (s[0].as_u64().unwrap() as usize, s[1].as_u64().unwrap() as usize);
    assert_eq!(chars[a..b].iter().collect::<String>(), recs[0]["audit"][0]["replacement"].as_str().unwrap());
    assert_eq!(s[2], "PER");

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["documents"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["backend"]["kind"], "reference");
    assert_eq!(manifest["seed"], 0);
}

#[test]
fn substitutive_run_uses_the_bank() {
    let dir = fixture();
    std::fs::write(dir.path().join("bank.tsv"), "the mayor\tPER\na spokesman\tPER\nberlin\tLOC\nmadrid\tLOC\n").unwrap();
    let out = run(
        dir.path(),
        &[
            "distort", "docs.jsonl", "-o", "out.jsonl", "--backend-reference", "corpus.txt", "--mode", "substitutive",
            "--bank", "bank.tsv", "--k", "2", "--seed", "5",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = records(&dir.path().join("out.jsonl"));
    let per = recs[0]["audit"][0]["replacement"].as_str().unwrap();
    assert!(["the mayor", "a spokesman"].contains(&per), "{per}");
    let loc = recs[1]["audit"][0]["replacement"].as_str().unwrap();
    assert!(["berlin", "madrid"].contains(&loc), "{loc}");
}

#[test]
fn conll_input() {
    let dir = fixture();
    std::fs::write(
        dir.path().join("in.conll"),
        "-DOCSTART- O\n\nthe O\nminister B-PER\nmet O\nthe O\nmayor B-PER\nof I-PER\nrome I-PER\n\nin O\nparis B-LOC\n",
    )
    .unwrap();
    let out = run(
        dir.path(),
        &["distort", "in.conll", "--format", "conll", "-o", "out.jsonl", "--backend-reference", "corpus.txt", "--k", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let recs = records(&dir.path().join("out.jsonl"));
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0]["audit"][1]["original"], "mayor of rome");
    assert_eq!(recs[1]["audit"][0]["original"], "paris");
}

#[test]
fn exit_codes() {
    let dir = fixture();
    let base = ["distort", "docs.jsonl", "-o", "out.jsonl"];
    let code = |extra: &[&str]| {
        let mut args = base.to_vec();
        args.extend_from_slice(extra);
        run(dir.path(), &args).status.code()
    };
    assert_eq!(code(&[]), Some(2), "no backend");
    assert_eq!(code(&["--backend-reference", "corpus.txt", "--mode", "substitutive"]), Some(2));
    assert_eq!(code(&["--backend-reference", "corpus.txt", "--k", "0"]), Some(2));
    assert_eq!(code(&["--backend-reference", "missing.txt"]), Some(4));
    assert_eq!(code(&["--backend-cmd", "exit 0"]), Some(3));
    std::fs::write(dir.path().join("bad.jsonl"), "{\"id\":\"x\",\"text\":\"ab\",\"spans\":[[0,9,\"X\"]]}\n").unwrap();
    let out = run(dir.path(), &["distort", "bad.jsonl", "-o", "o", "--backend-reference", "corpus.txt"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains('x'));
    std::fs::write(dir.path().join("broken.jsonl"), "{\"id\":\n").unwrap();
    let out = run(dir.path(), &["distort", "broken.jsonl", "-o", "o", "--backend-reference", "corpus.txt"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.jsonl:1"));
}

#[test]
fn child_process_backend_matches_in_process() {
    let dir = fixture();
    let local = run(dir.path(), &["distort", "docs.jsonl", "-o", "local.jsonl", "--backend-reference", "corpus.txt"]);
    assert!(local.status.success());
    let server = format!("'{}' serve --backend-reference corpus.txt", env!("CARGO_BIN_EXE_ndd"));
    let remote = run(
        dir.path(),
        &["distort", "docs.jsonl", "-o", "remote.jsonl", "--backend-cmd", &server, "--workers", "2"],
    );
    assert!(remote.status.success(), "{}", String::from_utf8_lossy(&remote.stderr));
    assert_eq!(texts(&dir.path().join("local.jsonl")), texts(&dir.path().join("remote.jsonl")));
}

#[test]
fn recorded_transcript_replays_without_a_model() {
    let dir = fixture();
    let server = format!(
        "'{}' serve --backend-reference corpus.txt --record transcript.jsonl",
        env!("CARGO_BIN_EXE_ndd")
    );
    let live = run(dir.path(), &["distort", "docs.jsonl", "-o", "live.jsonl", "--backend-cmd", &server]);
    assert!(live.status.success(), "{}", String::from_utf8_lossy(&live.stderr));
    assert!(dir.path().join("transcript.jsonl").exists());
    let replayed = run(
        dir.path(),
        &["distort", "docs.jsonl", "-o", "replayed.jsonl", "--backend-transcript", "transcript.jsonl"],
    );
    assert!(replayed.status.success(), "{}", String::from_utf8_lossy(&replayed.stderr));
    assert_eq!(texts(&dir.path().join("live.jsonl")), texts(&dir.path().join("replayed.jsonl")));
    // a different seed asks questions the transcript cannot answer
    let other = run(
        dir.path(),
        &[
            "distort", "docs.jsonl", "-o", "other.jsonl", "--backend-transcript", "transcript.jsonl", "--seed", "99",
        ],
    );
    assert_eq!(other.status.code(), Some(3));
}

#[test]
fn tcp_backend() {
    let dir = fixture();
    let mut server = ndd()
        .args(["serve", "--backend-reference", "corpus.txt", "--port", "0"])
        .current_dir(dir.path())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_owned();
    let out = run(dir.path(), &["distort", "docs.jsonl", "-o", "tcp.jsonl", "--backend-tcp", &addr, "--workers", "2"]);
    server.kill().unwrap();
    let _ = server.wait();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let local = run(dir.path(), &["distort", "docs.jsonl", "-o", "local.jsonl", "--backend-reference", "corpus.txt"]);
    assert!(local.status.success());
    assert_eq!(texts(&dir.path().join("local.jsonl")), texts(&dir.path().join("tcp.jsonl")));
}

#[test]
fn replay_detects_changed_output() {
    let dir = fixture();
    assert!(run(dir.path(), &["distort", "docs.jsonl", "-o", "out.jsonl", "--backend-reference", "corpus.txt"])
        .status
        .success());
    let ok = run(dir.path(), &["replay", "out.jsonl.manifest.json"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("replay ok"));
    // a corpus that predicts different words
    std::fs::write(dir.path().join("corpus.txt"), "the pilot met the crew in oslo\nthe crew met a pilot in lima").unwrap();
    let changed = run(dir.path(), &["replay", "out.jsonl.manifest.json"]);
    assert_eq!(changed.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&changed.stderr).contains("corpus.txt changed"));
}

#[test]
fn score_command() {
    let dir = fixture();
    let out = run(
        dir.path(),
        &[
            "score", "the minister met the delegation", "--backend-reference", "corpus.txt", "--span", "1:2",
            "--replacement", "mayor",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["edited"][1], "mayor");
    assert!(v["ndd"].as_f64().unwrap() > 0.0);
    assert_eq!(v["per_position"].as_array().unwrap().len(), 4);

    let same = run(
        dir.path(),
        &[
            "score", "the minister met the delegation", "--backend-reference", "corpus.txt", "--against",
            "the minister met the delegation",
        ],
    );
    let v: Value = serde_json::from_slice(&same.stdout).unwrap();
    assert_eq!(v["ndd"], 0.0);
    assert_eq!(v["delta_ppl"], 0.0);

    let whole = run(
        dir.path(),
        &["score", "paris", "--backend-reference", "corpus.txt", "--span", "0:1", "--replacement", "rome"],
    );
    assert_eq!(whole.status.code(), Some(5));
}

#[test]
fn bench_on_sts_and_perturbations() {
    let dir = fixture();
    std::fs::write(
        dir.path().join("sts.tsv"),
        "5.0\tthe minister met the delegation\tthe minister met the delegation\n\
         4.0\tthe minister met the delegation\tthe mayor met the delegation\n\
         1.0\tthe minister met the delegation\tofficials said the talks would resume\n\
         3.0\tthe talks in rome\tthe talks in paris\n",
    )
    .unwrap();
    let out = run(dir.path(), &["bench", "--backend-reference", "corpus.txt", "--sts", "sts.tsv", "-o", "r.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["pairs"], 4);
    let counts: u64 = r["bucket_counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(counts, 4);
    let names: Vec<&str> = r["metrics"].as_array().unwrap().iter().map(|m| m["metric"].as_str().unwrap()).collect();
    assert_eq!(names, ["ndd", "cosine", "delta_ppl", "ndd+cosine"]);
    assert_eq!(r["metrics"][0]["buckets"].as_array().unwrap().len(), 10);

    std::fs::write(dir.path().join("sentences.txt"), CORPUS).unwrap();
    std::fs::write(
        dir.path().join("lex.jsonl"),
        r#"{"word":"met","synonyms":["saw"],"antonyms":["avoided"]}
{"word":"said","synonyms":["stated"],"antonyms":["denied"]}
{"word":"late","synonyms":["tardy"],"antonyms":["early"]}
"#,
    )
    .unwrap();
    let out = run(
        dir.path(),
        &[
            "bench", "--backend-reference", "corpus.txt", "--sentences", "sentences.txt", "--lexicon", "lex.jsonl",
            "--test", "syn-ant", "--metrics", "ndd,cosine", "--pairs-out", "pairs.jsonl",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["metrics"].as_array().unwrap().len(), 2);
    let pairs = std::fs::read_to_string(dir.path().join("pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count() as u64, r["pairs"].as_u64().unwrap());
    assert!(r["pairs"].as_u64().unwrap() >= 8);
}

#[test]
fn help_and_version() {
    let out = ndd().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["distort", "replay", "score", "bench", "serve"] {
        assert!(text.contains(sub));
    }
    assert!(ndd().arg("--version").output().unwrap().status.success());
}
