use std::collections::BTreeMap;
use std::sync::RwLock;

use super::PortMapping;

type Key = (u32, u32, u32);

/// In-memory portmapper table keyed by (prog, vers, proto).
#[derive(Debug, Default)]
pub struct MappingRegistry {
    map: RwLock<BTreeMap<Key, u32>>,
}

impl MappingRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a mapping. Refuses (returns false) when the key is already
    /// taken or the port is outside 1..=65535.
    pub fn set(&self, m: &PortMapping) -> bool {
        if m.port == 0 || m.port > u16::MAX as u32 {
            return false;
        }
        let mut map = self.map.write().unwrap();
        let key = (m.prog, m.vers, m.proto);
        if map.contains_key(&key) {
            return false;
        }
        map.insert(key, m.port);
        true
    }

    /// Removes every mapping for (prog, vers), whatever the protocol.
    pub fn unset(&self, prog: u32, vers: u32) -> bool {
        let mut map = self.map.write().unwrap();
        let before = map.len();
        map.retain(|&(p, v, _), _| !(p == prog && v == vers));
        map.len() != before
    }

    /// The registered port, or 0 when unregistered.
    pub fn getport(&self, prog: u32, vers: u32, proto: u32) -> u32 {
        self.map.read().unwrap().get(&(prog, vers, proto)).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> Vec<PortMapping> {
        self.map
            .read()
            .unwrap()
            .iter()
            .map(|(&(prog, vers, proto), &port)| PortMapping { prog, vers, proto, port })
            .collect()
    }
}
