use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use super::*;
use crate::job::JobState;

fn fresh() -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::init(dir.path().join("var")).unwrap();
    (dir, store)
}

fn record(number: u64, key: &str, sender: &str) -> MasterRecord {
    MasterRecord {
        number,
        solver_key: key.into(),
        sender_tag: sender.into(),
        received: Utc
            .with_ymd_and_hms(2024, 3, 1, 12, 0, number as u32 % 60)
            .unwrap(),
        finished: None,
        disposition: Disposition::Done,
        comment: "SOCKET".into(),
    }
}

fn set_age(path: &Path, age: Duration) {
    let f = File::options().write(true).open(path).unwrap();
    f.set_modified(SystemTime::now() - age).unwrap();
}

#[test]
fn layout_is_created() {
    let (_d, store) = fresh();
    for rel in [
        "spool/SOCKET",
        "spool/WEB",
        "spool/KESTREL",
        "spool/JOBS",
        "jobs",
        "lib/solvers",
        "proc/stations",
        "logs",
        "databases",
        "tmp",
    ] {
        assert!(store.root().join(rel).is_dir(), "{rel}");
    }
    assert!(store.solver_list_path().is_file());
    assert!(store.station_ports_path().is_file());
    assert_eq!(fs::read_to_string(store.serial_path()).unwrap().trim(), "1");
    // a second init keeps existing state
    store.next_job_number().unwrap();
    let again = Store::init(store.root()).unwrap();
    assert_eq!(again.next_job_number().unwrap(), 2);
}

#[test]
fn serial_numbers_are_sequential() {
    let (_d, store) = fresh();
    assert_eq!(store.next_job_number().unwrap(), 1);
    assert_eq!(store.next_job_number().unwrap(), 2);
}

#[test]
fn serial_numbers_are_unique_under_contention() {
    let (_d, store) = fresh();
    let store = Arc::new(store);
    let handles: Vec<_> = (0..100)
        .map(|_| {
            let s = Arc::clone(&store);
            thread::spawn(move || s.next_job_number().unwrap())
        })
        .collect();
    let got: BTreeSet<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(got, (1..=100).collect());
}

#[test]
fn corrupt_serial_is_fatal() {
    let (_d, store) = fresh();
    fs::write(store.serial_path(), "banana").unwrap();
    assert!(matches!(
        store.next_job_number(),
        Err(StoreError::CorruptSerial(_))
    ));
    assert!(matches!(
        Store::open(store.root()),
        Err(StoreError::CorruptSerial(_))
    ));
}

#[test]
fn deposit_writes_file_marker_and_mail() {
    let (_d, store) = fresh();
    store
        .spool_deposit(Interface::Socket, "job.123", b"body")
        .unwrap();
    let spool = store.spool_dir(Interface::Socket).unwrap();
    assert_eq!(fs::read(spool.join("job.123")).unwrap(), b"body");
    assert!(spool.join("DONE.job.123").exists());
    assert!(spool.join("MAIL").exists());
    let got = store.spool_collect(Interface::Socket).unwrap();
    assert_eq!(got, vec![("job.123".to_string(), b"body".to_vec())]);
    assert!(store.spool_collect(Interface::Socket).unwrap().is_empty());
    assert!(fs::read_dir(&spool).unwrap().next().is_none());
}

#[test]
fn deposit_errors() {
    let (_d, store) = fresh();
    assert!(matches!(
        store.spool_deposit(Interface::Local, "x", b""),
        Err(StoreError::NoSpool(_))
    ));
    assert!(matches!(
        store.spool_deposit(Interface::Web, "MAIL", b""),
        Err(StoreError::BadName(_))
    ));
    fs::remove_dir(store.spool_dir(Interface::Kestrel).unwrap()).unwrap();
    assert!(matches!(
        store.spool_deposit(Interface::Kestrel, "x", b""),
        Err(StoreError::MissingSpool(_))
    ));
}

#[test]
fn collect_without_mail_is_empty() {
    let (_d, store) = fresh();
    let spool = store.spool_dir(Interface::Web).unwrap();
    fs::write(spool.join("a"), b"a").unwrap();
    fs::write(spool.join("DONE.a"), b"").unwrap();
    assert!(store.spool_collect(Interface::Web).unwrap().is_empty());
}

#[test]
fn incomplete_deposits_stay_in_place() {
    let (_d, store) = fresh();
    for name in ["a", "b", "c"] {
        store
            .spool_deposit(Interface::Web, name, name.as_bytes())
            .unwrap();
    }
    let spool = store.spool_dir(Interface::Web).unwrap();
    fs::write(spool.join("partial"), b"half").unwrap();
    let got: BTreeSet<String> = store
        .spool_collect(Interface::Web)
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(got, ["a", "b", "c"].map(String::from).into());
    assert_eq!(fs::read(spool.join("partial")).unwrap(), b"half");

    // once the writer finishes, the next pass picks it up
    fs::write(spool.join("DONE.partial"), b"").unwrap();
    fs::write(spool.join("MAIL"), b"").unwrap();
    let got = store.spool_collect(Interface::Web).unwrap();
    assert_eq!(got, vec![("partial".to_string(), b"half".to_vec())]);
}

#[test]
fn interleaved_deposits_are_neither_lost_nor_duplicated() {
    let (_d, store) = fresh();
    let store = Arc::new(store);
    let writers: Vec<_> = (0..4)
        .map(|w| {
            let s = Arc::clone(&store);
            thread::spawn(move || {
                for i in 0..50 {
                    let name = format!("w{w}.{i}");
                    s.spool_deposit(Interface::Socket, &name, name.as_bytes())
                        .unwrap();
                }
            })
        })
        .collect();
    let mut seen = Vec::new();
    while writers.iter().any(|w| !w.is_finished()) {
        for (name, body) in store.spool_collect(Interface::Socket).unwrap() {
            assert_eq!(name.as_bytes(), &body[..]);
            seen.push(name);
        }
    }
    for w in writers {
        w.join().unwrap();
    }
    for (name, _) in store.spool_collect(Interface::Socket).unwrap() {
        seen.push(name);
    }
    let unique: BTreeSet<_> = seen.iter().cloned().collect();
    assert_eq!(seen.len(), 200);
    assert_eq!(unique.len(), 200);
}

#[test]
fn job_dirs_keep_exact_bytes() {
    let (_d, store) = fresh();
    let body = b"TYPE a\r\nSOLVER b\r\n\x00\xff".to_vec();
    let dir = store.create_job_dir(7773, &body).unwrap();
    assert_eq!(dir, store.root().join("jobs/job.7773"));
    assert_eq!(fs::read(dir.join("job.received")).unwrap(), body);
    assert!(matches!(
        store.create_job_dir(7773, b"again"),
        Err(StoreError::JobExists(_))
    ));
}

#[test]
fn master_gap_is_filled_once() {
    let (_d, store) = fresh();
    assert!(store
        .query_master(&MasterFilter::default())
        .unwrap()
        .is_empty());
    store.write_master_record(&record(1, "A:B", "x")).unwrap();
    store.write_master_record(&record(3, "A:B", "y")).unwrap();
    let data = fs::read(store.master_path()).unwrap();
    assert_eq!(data.len(), 768);

    let report = store.clean(Duration::from_secs(3600), SystemTime::now());
    assert_eq!(
        report,
        CleanReport {
            archived: 0,
            filled: 1
        }
    );
    let data = fs::read(store.master_path()).unwrap();
    assert_eq!(data.len(), 768);
    assert_eq!(&data[256..512], &blank_row()[..]);
    assert_eq!(
        store
            .clean(Duration::from_secs(3600), SystemTime::now())
            .filled,
        0
    );

    let all = store.query_master(&MasterFilter::default()).unwrap();
    assert_eq!(all.iter().map(|r| r.number).collect::<Vec<_>>(), [1, 3]);
    assert_eq!(
        store.read_master_record(3).unwrap().unwrap().sender_tag,
        "y"
    );
    assert_eq!(store.read_master_record(2).unwrap(), None);
    assert_eq!(store.read_master_record(9).unwrap(), None);
}

#[test]
fn late_record_overwrites_its_gap() {
    let (_d, store) = fresh();
    store
        .write_master_record(&record(3, "A:B", "late"))
        .unwrap();
    store.clean(Duration::from_secs(1), SystemTime::now());
    store.write_master_record(&record(2, "A:B", "mid")).unwrap();
    let nums: Vec<u64> = store
        .query_master(&MasterFilter::default())
        .unwrap()
        .iter()
        .map(|r| r.number)
        .collect();
    assert_eq!(nums, [2, 3]);
}

#[test]
fn query_filters_match_a_plain_scan() {
    let (_d, store) = fresh();
    let keys = ["GAMS:BDMLP", "NLP:SNOPT", "ADMIN:HELP"];
    let senders = ["WEB_USER a@x.org", "10.0.0.1", "TRIAL_WEB_USER b@y.org"];
    let mut written = Vec::new();
    for n in 1..=30u64 {
        let r = record(n, keys[n as usize % 3], senders[(n as usize / 3) % 3]);
        store.write_master_record(&r).unwrap();
        written.push(r);
    }
    let from = Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 10).unwrap();
    let to = Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 20).unwrap();
    let filters = [
        MasterFilter::default(),
        MasterFilter {
            solver: Some("nlp:snopt".into()),
            ..Default::default()
        },
        MasterFilter {
            sender: Some("WEB_USER".into()),
            ..Default::default()
        },
        MasterFilter {
            solver: Some("GAMS:BDMLP".into()),
            received_from: Some(from),
            received_to: Some(to),
            ..Default::default()
        },
    ];
    for f in &filters {
        let expected: Vec<&MasterRecord> = written
            .iter()
            .filter(|r| {
                f.solver
                    .as_ref()
                    .is_none_or(|s| s.to_uppercase() == r.solver_key)
                    && f.sender
                        .as_ref()
                        .is_none_or(|s| r.sender_tag.contains(s.as_str()))
                    && f.received_from.is_none_or(|t| r.received >= t)
                    && f.received_to.is_none_or(|t| r.received < t)
            })
            .collect();
        let got = store.query_master(f).unwrap();
        assert_eq!(got.iter().collect::<Vec<_>>(), expected, "{f:?}");
    }
}

#[test]
fn queues_text() {
    assert_eq!(
        queues_snapshot(&[], &[]),
        "Job Queues:\nNo jobs in queue.\nJob Execution:\nNo jobs executing.\n"
    );
    let mut a = Job::new(12, Interface::Socket, Utc::now());
    a.solver_key = "GAMS:BDMLP".into();
    a.state = JobState::Queued;
    let mut b = a.clone();
    b.number = 14;
    let mut c = a.clone();
    c.number = 9;
    c.solver_key = "NLP:SNOPT".into();
    assert_eq!(
        queues_snapshot(&[a, b], &[c]),
        "Job Queues:\n  GAMS:BDMLP: 12 14\nJob Execution:\n  NLP:SNOPT: 9\n"
    );
}

#[test]
fn queues_file_is_replaced_whole() {
    let (_d, store) = fresh();
    store.write_queues(&[], &[]).unwrap();
    let text = fs::read_to_string(store.queues_path()).unwrap();
    assert!(text.starts_with("Job Queues:\n"));
    let leftovers = fs::read_dir(store.logs_dir())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".tmp")
        })
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn clean_archives_only_old_finished_jobs() {
    let (_d, store) = fresh();
    assert_eq!(
        store.clean(Duration::from_secs(60), SystemTime::now()),
        CleanReport::default()
    );
    let day = Duration::from_secs(86_400);
    for n in 1..=4u64 {
        let dir = store.create_job_dir(n, b"x").unwrap();
        fs::write(dir.join("job.results"), format!("results {n}")).unwrap();
        if n != 4 {
            fs::write(dir.join(DONE), b"").unwrap();
        }
    }
    set_age(&store.job_dir(1).join(DONE), 3 * day);
    set_age(&store.job_dir(2).join(DONE), 3 * day);
    // job 4 is still running however old its directory is
    let report = store.clean(2 * day, SystemTime::now());
    assert_eq!(report.archived, 2);
    assert!(!store.job_dir(1).exists() && !store.job_dir(2).exists());
    assert!(store.job_dir(3).exists() && store.job_dir(4).exists());

    let tgz = fs::read(store.archive_dir().join("job.1.tar.gz")).unwrap();
    let mut ar = tar::Archive::new(flate2::read::GzDecoder::new(&tgz[..]));
    let names: BTreeSet<String> = ar
        .entries()
        .unwrap()
        .map(|e| e.unwrap().path().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains("job.1/job.results"), "{names:?}");
}

#[test]
fn logs_append_lines() {
    let (_d, store) = fresh();
    store.log(Log::Receiver, "receiver: one");
    store.log(Log::Receiver, "receiver: two\n");
    assert_eq!(
        fs::read_to_string(store.log_path(Log::Receiver)).unwrap(),
        "receiver: one\nreceiver: two\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn master_length_stays_row_aligned(numbers in proptest::collection::vec(1u64..64, 1..12)) {
        let (_d, store) = fresh();
        for &n in &numbers {
            store.write_master_record(&record(n, "K:V", "s")).unwrap();
            let len = fs::metadata(store.master_path()).unwrap().len();
            prop_assert_eq!(len % RECORD_LEN as u64, 0);
        }
        let expected: BTreeSet<u64> = numbers.iter().copied().collect();
        let got: Vec<u64> = store
            .query_master(&MasterFilter::default())
            .unwrap()
            .iter()
            .map(|r| r.number)
            .collect();
        prop_assert_eq!(got, expected.into_iter().collect::<Vec<_>>());
    }
}
