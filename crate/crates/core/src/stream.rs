//! Streaming shard reader with bounded prefetch.
//!
//! Sources are a local directory or an `http://` base URL. Shards are files
//! named `shard-NNNNN.tshd` (see [`shard_file_name`]); over HTTP they are
//! requested in index order starting at 0 until the server answers 404.

use std::collections::VecDeque;
use std::io::Read;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::shard::{decode_shard, parse_shard_file_name, shard_file_name, Record, ShardError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShardSource {
    Dir(PathBuf),
    Http(String),
}

impl ShardSource {
    pub fn parse(s: &str) -> Self {
        if s.starts_with("http://") || s.starts_with("https://") {
            ShardSource::Http(s.trim_end_matches('/').to_string())
        } else {
            ShardSource::Dir(PathBuf::from(s))
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub prefetch_depth: usize,
    /// Skip shards that fail verification instead of stopping.
    pub skip_corrupt: bool,
    /// Attempts per HTTP shard before giving up.
    pub retries: u32,
    pub retry_delay: Duration,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            prefetch_depth: 2,
            skip_corrupt: false,
            retries: 3,
            retry_delay: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamStats {
    pub shards_fetched: u64,
    pub bytes_fetched: u64,
    pub shards_skipped: u64,
    pub peak_buffered: usize,
    pub fetch_seconds: f64,
    pub http_retries: u64,
}

#[derive(Default)]
struct Shared {
    buffered: usize,
    cancelled: bool,
    stats: StreamStats,
}

struct Slots {
    state: Mutex<Shared>,
    cv: Condvar,
}

impl Slots {
    /// Blocks until a buffer slot is free. Returns false once cancelled.
    fn acquire(&self, depth: usize) -> bool {
        let mut s = self.state.lock().unwrap();
        while s.buffered >= depth && !s.cancelled {
            s = self.cv.wait(s).unwrap();
        }
        if s.cancelled {
            return false;
        }
        s.buffered += 1;
        s.stats.peak_buffered = s.stats.peak_buffered.max(s.buffered);
        true
    }

    fn release(&self) {
        let mut s = self.state.lock().unwrap();
        s.buffered -= 1;
        self.cv.notify_all();
    }
}

type Fetched = Result<(usize, Vec<u8>), ShardError>;

/// Iterator over the records of every shard, in shard order.
pub struct RecordStream {
    rx: Receiver<Fetched>,
    current: VecDeque<Record>,
    holding: bool,
    slots: Arc<Slots>,
    skip_corrupt: bool,
    finished: bool,
    worker: Option<JoinHandle<()>>,
}

pub fn stream_records(source: &ShardSource, cfg: &StreamConfig) -> Result<RecordStream, ShardError> {
    let depth = cfg.prefetch_depth.max(1);
    let slots = Arc::new(Slots {
        state: Mutex::new(Shared::default()),
        cv: Condvar::new(),
    });
    let (tx, rx) = mpsc::channel();
    let worker = match source {
        ShardSource::Dir(dir) => {
            let mut files: Vec<(usize, PathBuf)> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let idx = parse_shard_file_name(e.file_name().to_str()?)?;
                    Some((idx, e.path()))
                })
                .collect();
            files.sort();
            let slots = slots.clone();
            std::thread::spawn(move || {
                fetch_loop(&slots, depth, &tx, |i| match files.get(i) {
                    Some((idx, path)) => std::fs::read(path).map(|b| Some((*idx, b))).map_err(ShardError::from),
                    None => Ok(None),
                })
            })
        }
        ShardSource::Http(base) => {
            let base = base.clone();
            let (retries, delay) = (cfg.retries.max(1), cfg.retry_delay);
            let slots2 = slots.clone();
            std::thread::spawn(move || {
                let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
                fetch_loop(&slots2, depth, &tx, |i| {
                    let url = format!("{base}/{}", shard_file_name(i));
                    let (body, retried) = http_get(&agent, &url, retries, delay)?;
                    slots2.state.lock().unwrap().stats.http_retries += retried as u64;
                    Ok(body.map(|b| (i, b)))
                })
            })
        }
    };
    Ok(RecordStream {
        rx,
        current: VecDeque::new(),
        holding: false,
        slots,
        skip_corrupt: cfg.skip_corrupt,
        finished: false,
        worker: Some(worker),
    })
}

fn fetch_loop<F>(slots: &Slots, depth: usize, tx: &Sender<Fetched>, mut fetch: F)
where
    F: FnMut(usize) -> Result<Option<(usize, Vec<u8>)>, ShardError>,
{
    for i in 0.. {
        if !slots.acquire(depth) {
            return;
        }
        let t0 = Instant::now();
        let res = fetch(i);
        {
            let mut s = slots.state.lock().unwrap();
            s.stats.fetch_seconds += t0.elapsed().as_secs_f64();
            if let Ok(Some((_, b))) = &res {
                s.stats.shards_fetched += 1;
                s.stats.bytes_fetched += b.len() as u64;
            }
        }
        match res {
            Ok(Some(item)) => {
                if tx.send(Ok(item)).is_err() {
                    return;
                }
            }
            Ok(None) => {
                slots.release();
                return;
            }
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    }
}

/// GET with retries; partial bodies resume with a Range request. `None`
/// means the server has no such shard.
fn http_get(
    agent: &ureq::Agent,
    url: &str,
    attempts: u32,
    delay: Duration,
) -> Result<(Option<Vec<u8>>, u32), ShardError> {
    let mut body: Vec<u8> = Vec::new();
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            std::thread::sleep(delay);
        }
        let mut req = agent.get(url);
        if !body.is_empty() {
            req = req.set("Range", &format!("bytes={}-", body.len()));
        }
        match req.call() {
            Ok(resp) => {
                if resp.status() != 206 {
                    body.clear();
                }
                let expected = resp.header("Content-Length").and_then(|v| v.parse::<usize>().ok());
                let before = body.len();
                let read = resp.into_reader().read_to_end(&mut body);
                let complete = expected.is_none_or(|n| body.len() - before == n);
                match read {
                    Ok(_) if complete => return Ok((Some(body), attempt)),
                    Ok(_) => last = format!("short body ({} bytes)", body.len() - before),
                    Err(e) => last = e.to_string(),
                }
            }
            Err(ureq::Error::Status(404, _)) => return Ok((None, attempt)),
            Err(e) => last = e.to_string(),
        }
    }
    Err(ShardError::FetchFailed {
        what: url.to_string(),
        attempts,
        reason: last,
    })
}

impl RecordStream {
    pub fn stats(&self) -> StreamStats {
        self.slots.state.lock().unwrap().stats.clone()
    }

    fn drop_current(&mut self) {
        if self.holding {
            self.holding = false;
            self.slots.release();
        }
    }
}

impl Iterator for RecordStream {
    type Item = Result<Record, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(r) = self.current.pop_front() {
                if self.current.is_empty() {
                    self.drop_current();
                }
                return Some(Ok(r));
            }
            self.drop_current();
            if self.finished {
                return None;
            }
            match self.rx.recv() {
                Err(_) => {
                    self.finished = true;
                    return None;
                }
                Ok(Err(e)) => {
                    self.finished = true;
                    return Some(Err(e));
                }
                Ok(Ok((_, bytes))) => {
                    self.holding = true;
                    match decode_shard(&bytes) {
                        Ok(records) => self.current = records.into(),
                        Err(_) if self.skip_corrupt => {
                            self.slots.state.lock().unwrap().stats.shards_skipped += 1;
                        }
                        Err(e) => {
                            self.drop_current();
                            self.finished = true;
                            return Some(Err(e));
                        }
                    }
                }
            }
        }
    }
}

impl Drop for RecordStream {
    fn drop(&mut self) {
        {
            let mut s = self.slots.state.lock().unwrap();
            s.cancelled = true;
            self.slots.cv.notify_all();
        }
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shard::{encode_shard, CODES_PER_RECORD};

    fn write_shards(dir: &std::path::Path, shards: usize, per: usize) -> Vec<Record> {
        let mut all = Vec::new();
        for s in 0..shards {
            let recs: Vec<Record> = (0..per)
                .map(|i| Record {
                    caption_tokens: vec![s as u32, i as u32],
                    image_codes: (0..CODES_PER_RECORD)
                        .map(|j| ((j * 31 + s * 7 + i) % 8192) as u16)
                        .collect(),
                })
                .collect();
            std::fs::write(dir.join(shard_file_name(s)), encode_shard(&recs).unwrap()).unwrap();
            all.extend(recs);
        }
        all
    }

    #[test]
    fn local_concatenation_and_bound() {
        let dir = tempfile::tempdir().unwrap();
        let expected = write_shards(dir.path(), 5, 3);
        std::fs::write(dir.path().join("README"), b"not a shard").unwrap();
        for depth in [1, 2, 4] {
            let cfg = StreamConfig {
                prefetch_depth: depth,
                ..StreamConfig::default()
            };
            let mut s = stream_records(&ShardSource::Dir(dir.path().into()), &cfg).unwrap();
            let got: Vec<Record> = s.by_ref().map(Result::unwrap).collect();
            assert_eq!(got, expected);
            let st = s.stats();
            assert!(st.peak_buffered <= depth && st.peak_buffered >= 1, "{st:?}");
            assert_eq!(st.shards_fetched, 5);
        }
    }

    #[test]
    fn corrupt_shard_fails_or_skips() {
        let dir = tempfile::tempdir().unwrap();
        let expected = write_shards(dir.path(), 3, 2);
        let p = dir.path().join(shard_file_name(1));
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();

        let src = ShardSource::Dir(dir.path().into());
        let got: Vec<_> = stream_records(&src, &StreamConfig::default()).unwrap().collect();
        assert_eq!(got.len(), 3);
        assert!(matches!(got[2], Err(ShardError::ChecksumMismatch { .. })));

        let cfg = StreamConfig {
            skip_corrupt: true,
            ..StreamConfig::default()
        };
        let mut s = stream_records(&src, &cfg).unwrap();
        let got: Vec<Record> = s.by_ref().map(Result::unwrap).collect();
        assert_eq!(got.len(), 4);
        assert_eq!(got[2..], expected[4..]);
        assert_eq!(s.stats().shards_skipped, 1);
    }

    #[test]
    fn early_drop_does_not_hang() {
        let dir = tempfile::tempdir().unwrap();
        write_shards(dir.path(), 6, 1);
        let mut s = stream_records(&ShardSource::Dir(dir.path().into()), &StreamConfig::default()).unwrap();
        assert!(s.next().unwrap().is_ok());
        drop(s);
    }

    #[test]
    fn source_parsing() {
        assert_eq!(
            ShardSource::parse("http://h:1/x/"),
            ShardSource::Http("http://h:1/x".into())
        );
        assert_eq!(
            ShardSource::parse("data/shards"),
            ShardSource::Dir("data/shards".into())
        );
    }
}
