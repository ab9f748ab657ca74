use serde::{Deserialize, Serialize};

use super::client::EngineClient;
use super::wire::WeightUpdatePayload;
use crate::error::{Error, Result};

/// Weight-transfer group: engines that receive every update, in canonical
/// (sorted, deduplicated) order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessGroup {
    pub group_id: String,
    pub members: Vec<String>,
}

/// Canonical member list and its id, `pg-` followed by the CRC-32 of the
/// newline-joined members in hex.
pub fn group_id_for(members: &[String]) -> (String, Vec<String>) {
    let mut canonical = members.to_vec();
    canonical.sort();
    canonical.dedup();
    let id = format!("pg-{:08x}", crc32fast::hash(canonical.join("\n").as_bytes()));
    (id, canonical)
}

/// Form a group over `members` (engine addresses). Every member is health
/// checked first; if any join fails, members that already joined are told
/// to leave again.
pub fn init_process_group(members: &[String]) -> Result<ProcessGroup> {
    if members.is_empty() {
        return Err(Error::GroupFormation("member list is empty".into()));
    }
    let (group_id, canonical) = group_id_for(members);
    for m in &canonical {
        EngineClient::new(m.clone())
            .health()
            .map_err(|e| Error::GroupFormation(format!("member {m} unreachable: {e}")))?;
    }
    let mut joined = Vec::new();
    for (rank, m) in canonical.iter().enumerate() {
        let client = EngineClient::new(m.clone());
        match client.join_group(&group_id, &canonical, rank as u64) {
            Ok(()) => joined.push(client),
            Err(e) => {
                for c in &joined {
                    let _ = c.leave_group(&group_id);
                }
                return Err(Error::GroupFormation(format!("member {m} refused to join: {e}")));
            }
        }
    }
    Ok(ProcessGroup {
        group_id,
        members: canonical,
    })
}

pub fn destroy_process_group(group: &ProcessGroup) -> Result<()> {
    for m in &group.members {
        EngineClient::new(m.clone()).leave_group(&group.group_id)?;
    }
    Ok(())
}

/// Send `payload` to every member in order. Returns the applied version.
pub fn request_weight_update(group: &ProcessGroup, payload: &WeightUpdatePayload) -> Result<u64> {
    let mut applied = payload.new_version;
    for m in &group.members {
        applied = EngineClient::new(m.clone()).request_weight_update(&group.group_id, payload)?;
    }
    Ok(applied)
}
