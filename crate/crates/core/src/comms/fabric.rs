//! In-process message fabric.
//!
//! Every exchange is one synchronous round: each agent posts a message, waits
//! at the shared barrier, then reads what its neighbours posted. A message has
//! two parts. The header is control-plane data (round bookkeeping and flooded
//! termination flags) and is always delivered. The payload is algorithm data
//! and goes through the link model: it may be dropped or delayed by whole
//! rounds, in which case the receiver keeps using the last payload it got from
//! that neighbour. Round 0 of every session is the setup round and is always
//! delivered immediately.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CommsError, Topology};
use crate::runtime::RoundBarrier;

/// Bytes of fixed envelope per message: round index (u64) and sender (u32).
pub const ENVELOPE_BYTES: usize = 12;

/// Serialized size of a message part.
pub trait Wire: Clone + Send + Sync {
    fn wire_bytes(&self) -> usize;
}

impl Wire for () {
    fn wire_bytes(&self) -> usize {
        0
    }
}

impl Wire for bool {
    fn wire_bytes(&self) -> usize {
        1
    }
}

impl Wire for Vec<bool> {
    fn wire_bytes(&self) -> usize {
        self.len()
    }
}

impl Wire for Vec<f64> {
    fn wire_bytes(&self) -> usize {
        8 * self.len()
    }
}

/// Per directed link delay (whole rounds) and drop probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    /// `delay_rounds[from][to]`
    pub delay_rounds: Vec<Vec<u32>>,
    /// `drop_prob[from][to]`
    pub drop_prob: Vec<Vec<f64>>,
    pub seed: u64,
}

impl LinkModel {
    pub fn ideal(n: usize) -> Self {
        Self::uniform(n, 0, 0.0, 0)
    }

    pub fn uniform(n: usize, delay: u32, drop: f64, seed: u64) -> Self {
        Self { delay_rounds: vec![vec![delay; n]; n], drop_prob: vec![vec![drop; n]; n], seed }
    }

    pub fn validate(&self, n: usize) -> Result<(), CommsError> {
        let square = |rows: usize, cols: &[usize]| rows == n && cols.iter().all(|&c| c == n);
        let delay_cols: Vec<usize> = self.delay_rounds.iter().map(Vec::len).collect();
        let drop_cols: Vec<usize> = self.drop_prob.iter().map(Vec::len).collect();
        if !square(self.delay_rounds.len(), &delay_cols) || !square(self.drop_prob.len(), &drop_cols) {
            return Err(CommsError::InvalidLink(format!("link matrices must be {n}x{n}")));
        }
        if let Some(p) = self.drop_prob.iter().flatten().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CommsError::InvalidLink(format!("drop probability {p} outside [0, 1]")));
        }
        Ok(())
    }

    fn link_seed(&self, channel: u64, session: u64, from: usize, to: usize) -> u64 {
        // splitmix64 over the identifying tuple
        let mut x = self.seed;
        for v in [channel, session, from as u64, to as u64] {
            x = x.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
            x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            x ^= x >> 31;
        }
        x
    }
}

/// One entry of the message log. Agent ids are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: u64,
    pub from: usize,
    pub to: usize,
    pub delivered: bool,
    pub bytes: usize,
}

/// Shared state of one emulated network.
#[derive(Debug)]
pub struct Fabric {
    topology: Topology,
    links: LinkModel,
    barrier: RoundBarrier,
    log: Mutex<Vec<MessageRecord>>,
}

impl Fabric {
    pub fn new(topology: Topology, links: LinkModel, timeout: Duration) -> Result<Arc<Self>, CommsError> {
        links.validate(topology.n())?;
        let barrier = RoundBarrier::new(topology.n(), timeout);
        Ok(Arc::new(Self { topology, links, barrier, log: Mutex::new(Vec::new()) }))
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn barrier(&self) -> &RoundBarrier {
        &self.barrier
    }

    /// Sorted copy of the message log.
    pub fn message_log(&self) -> Vec<MessageRecord> {
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner()).clone();
        log.sort_unstable();
        log
    }

    pub fn endpoint(self: &Arc<Self>, me: usize) -> Endpoint {
        Endpoint { me, fabric: Arc::clone(self), global_round: 0 }
    }

    fn record(&self, records: &[MessageRecord]) {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).extend_from_slice(records);
    }
}

#[derive(Debug, Clone)]
struct Posted<H, P> {
    session: u64,
    round: u64,
    header: H,
    payload: P,
}

/// Typed mailbox shared by all agents. Each agent owns one double-buffered
/// slot, indexed by global round parity.
#[derive(Debug)]
pub struct Channel<H, P> {
    id: u64,
    slots: Vec<Mutex<[Option<Posted<H, P>>; 2]>>,
}

impl<H: Wire, P: Wire> Channel<H, P> {
    pub fn new(id: u64, n: usize) -> Arc<Self> {
        Arc::new(Self { id, slots: (0..n).map(|_| Mutex::new([None, None])).collect() })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    fn post(&self, me: usize, parity: usize, msg: Posted<H, P>) {
        self.slots[me].lock().unwrap_or_else(|e| e.into_inner())[parity] = Some(msg);
    }

    /// Reads `owner`'s slot on behalf of `reader`. Only neighbours may be read.
    fn read(&self, topology: &Topology, reader: usize, owner: usize, parity: usize) -> Result<Option<Posted<H, P>>, CommsError> {
        if reader != owner && !topology.is_adjacent(reader, owner) {
            return Err(CommsError::NotNeighbour { reader, owner });
        }
        Ok(self.slots[owner].lock().unwrap_or_else(|e| e.into_inner())[parity].clone())
    }
}

/// Receiver-side state of one inbound link during a session.
#[derive(Debug)]
struct Inbound<P> {
    from: usize,
    delay: u64,
    drop: f64,
    rng: ChaCha8Rng,
    pending: VecDeque<(u64, P)>,
    last: Option<P>,
}

/// A run of consecutive rounds on one channel, with fresh link state.
#[derive(Debug)]
pub struct Session<P> {
    channel: u64,
    id: u64,
    round: u64,
    inbound: Vec<Inbound<P>>,
}

impl<P> Session<P> {
    pub fn round(&self) -> u64 {
        self.round
    }
}

/// Message as seen by the receiver after link emulation.
#[derive(Debug, Clone)]
pub struct Received<H, P> {
    pub from: usize,
    pub header: H,
    pub payload: P,
    /// False when the payload is a held-over copy.
    pub fresh: bool,
}

/// One agent's handle on the fabric.
#[derive(Debug)]
pub struct Endpoint {
    me: usize,
    fabric: Arc<Fabric>,
    global_round: u64,
}

impl Endpoint {
    pub fn id(&self) -> usize {
        self.me
    }

    pub fn neighbours(&self) -> &[usize] {
        self.fabric.topology.neighbours(self.me)
    }

    pub fn diameter(&self) -> usize {
        self.fabric.topology.diameter()
    }

    pub fn global_round(&self) -> u64 {
        self.global_round
    }

    pub fn fabric(&self) -> &Arc<Fabric> {
        &self.fabric
    }

    pub fn open_session<P>(&self, channel: u64, session: u64) -> Session<P> {
        let links = &self.fabric.links;
        let inbound = self
            .neighbours()
            .iter()
            .map(|&from| Inbound {
                from,
                delay: u64::from(links.delay_rounds[from][self.me]),
                drop: links.drop_prob[from][self.me],
                rng: ChaCha8Rng::seed_from_u64(links.link_seed(channel, session, from, self.me)),
                pending: VecDeque::new(),
                last: None,
            })
            .collect();
        Session { channel, id: session, round: 0, inbound }
    }

    /// One synchronous round: post, rendezvous, collect neighbour messages.
    pub fn exchange<H: Wire, P: Wire>(
        &mut self,
        channel: &Channel<H, P>,
        session: &mut Session<P>,
        header: H,
        payload: P,
    ) -> Result<Vec<Received<H, P>>, CommsError> {
        debug_assert_eq!(channel.id, session.channel);
        let parity = (self.global_round % 2) as usize;
        let round = session.round;
        channel.post(self.me, parity, Posted { session: session.id, round, header, payload });
        if let Err(e) = self.fabric.barrier.wait(self.global_round) {
            return Err(e.into());
        }
        let mut out = Vec::with_capacity(session.inbound.len());
        let mut records = Vec::with_capacity(session.inbound.len());
        for link in &mut session.inbound {
            let posted = channel.read(&self.fabric.topology, self.me, link.from, parity)?;
            let posted = match posted {
                Some(p) if p.session == session.id && p.round == round => p,
                other => {
                    let err = CommsError::RoundMismatch {
                        reader: self.me,
                        sender: link.from,
                        expected: (session.id, round),
                        found: other.map(|p| (p.session, p.round)),
                    };
                    self.fabric.barrier.abort(err.to_string());
                    return Err(err);
                }
            };
            let bytes = ENVELOPE_BYTES + posted.header.wire_bytes() + posted.payload.wire_bytes();
            let (delivered, fresh) = if round == 0 {
                link.pending.clear();
                link.last = Some(posted.payload);
                (true, true)
            } else {
                let dropped = link.drop > 0.0 && link.rng.random::<f64>() < link.drop;
                if !dropped {
                    link.pending.push_back((round + link.delay, posted.payload));
                }
                let mut fresh = false;
                while link.pending.front().is_some_and(|(arrival, _)| *arrival <= round) {
                    if let Some((_, p)) = link.pending.pop_front() {
                        link.last = Some(p);
                        fresh = true;
                    }
                }
                (!dropped, fresh)
            };
            records.push(MessageRecord {
                round: self.global_round,
                from: link.from + 1,
                to: self.me + 1,
                delivered,
                bytes,
            });
            let payload = link.last.clone().ok_or(CommsError::RoundMismatch {
                reader: self.me,
                sender: link.from,
                expected: (session.id, 0),
                found: None,
            })?;
            out.push(Received { from: link.from, header: posted.header, payload, fresh });
        }
        self.fabric.record(&records);
        self.global_round += 1;
        session.round += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Bytes of delivered messages.
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BandwidthReport {
    /// Keyed by 1-based `(from, to)`.
    #[serde(with = "link_list")]
    pub links: BTreeMap<(usize, usize), LinkStats>,
    pub total: LinkStats,
    pub rounds: u64,
}

/// JSON objects need string keys, so links go out as a list.
mod link_list {
    use super::LinkStats;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        from: usize,
        to: usize,
        #[serde(flatten)]
        stats: LinkStats,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<(usize, usize), LinkStats>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map.iter().map(|(&(from, to), &stats)| Entry { from, to, stats }).collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(usize, usize), LinkStats>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries.into_iter().map(|e| ((e.from, e.to), e.stats)).collect())
    }
}

pub fn bandwidth_report(log: &[MessageRecord]) -> BandwidthReport {
    let mut report = BandwidthReport::default();
    let mut rounds = std::collections::BTreeSet::new();
    for rec in log {
        rounds.insert(rec.round);
        for stats in [report.links.entry((rec.from, rec.to)).or_default(), &mut report.total] {
            stats.sent += 1;
            if rec.delivered {
                stats.delivered += 1;
                stats.bytes += rec.bytes as u64;
            } else {
                stats.dropped += 1;
            }
        }
    }
    report.rounds = rounds.len() as u64;
    report
}

/// Writes the log as JSON lines `{round, from, to, delivered, bytes}`.
pub fn write_message_log<W: Write>(log: &[MessageRecord], mut out: W) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_message_log<R: BufRead>(input: R) -> std::io::Result<Vec<MessageRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}
