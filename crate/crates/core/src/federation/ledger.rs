use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundUsage {
    pub round: u64,
    pub uplink_bytes: u64,
    pub uplink_messages: u64,
    pub downlink_bytes: u64,
    pub downlink_messages: u64,
}

/// Per-round communication accounting. Messages are attributed to the round
/// stamped in their header.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    rounds: Vec<RoundUsage>,
    total_uplink: u64,
    total_downlink: u64,
}

impl CommLedger {
    fn entry(&mut self, round: u64) -> &mut RoundUsage {
        match self.rounds.iter().position(|r| r.round == round) {
            Some(i) => &mut self.rounds[i],
            None => {
                self.rounds.push(RoundUsage {
                    round,
                    ..RoundUsage::default()
                });
                self.rounds.sort_by_key(|r| r.round);
                let i = self.rounds.iter().position(|r| r.round == round).expect("inserted");
                &mut self.rounds[i]
            }
        }
    }

    pub fn record_uplink(&mut self, round: u64, bytes: usize) {
        let e = self.entry(round);
        e.uplink_bytes += bytes as u64;
        e.uplink_messages += 1;
        self.total_uplink += bytes as u64;
    }

    pub fn record_downlink(&mut self, round: u64, bytes: usize) {
        let e = self.entry(round);
        e.downlink_bytes += bytes as u64;
        e.downlink_messages += 1;
        self.total_downlink += bytes as u64;
    }

    pub fn round(&self, round: u64) -> Option<&RoundUsage> {
        self.rounds.iter().find(|r| r.round == round)
    }

    pub fn rounds(&self) -> &[RoundUsage] {
        &self.rounds
    }

    pub fn total_uplink(&self) -> u64 {
        self.total_uplink
    }

    pub fn total_downlink(&self) -> u64 {
        self.total_downlink
    }
}
