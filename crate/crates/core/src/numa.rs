//! Thin platform layer: node topology discovery, memory binding and thread
//! pinning. Linux only; other platforms report no NUMA support.

use std::fs;
use std::io;
use std::path::Path;

/// One platform NUMA node and the CPUs attached to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInfo {
    pub id: usize,
    pub cpus: Vec<usize>,
}

/// Parses a kernel cpulist string such as `0-3,8,10-11`.
pub fn parse_cpulist(s: &str) -> Option<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Some(Vec::new());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().ok()?, b.parse().ok()?);
                if b < a {
                    return None;
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().ok()?),
        }
    }
    Some(out)
}

/// Nodes reported by the platform, or `None` if the platform exposes no
/// node information.
pub fn detect_nodes() -> Option<Vec<NodeInfo>> {
    let root = Path::new("/sys/devices/system/node");
    let online = fs::read_to_string(root.join("online")).ok()?;
    let ids = parse_cpulist(&online)?;
    let mut nodes = Vec::with_capacity(ids.len());
    for id in ids {
        let cpus = fs::read_to_string(root.join(format!("node{id}/cpulist")))
            .ok()
            .and_then(|s| parse_cpulist(&s))
            .unwrap_or_default();
        nodes.push(NodeInfo { id, cpus });
    }
    Some(nodes)
}

/// Platform nodes, falling back to a single node holding every CPU.
pub fn nodes_or_single() -> Vec<NodeInfo> {
    match detect_nodes() {
        Some(n) if !n.is_empty() => n,
        _ => {
            let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
            vec![NodeInfo {
                id: 0,
                cpus: (0..cpus).collect(),
            }]
        }
    }
}

#[cfg(target_os = "linux")]
mod sys {
    use std::io;

    const MPOL_BIND: libc::c_long = 2;
    const MPOL_F_NODE: libc::c_long = 1;
    const MPOL_F_ADDR: libc::c_long = 2;
    const MASK_BITS: usize = 1024;

    pub fn bind_memory(ptr: *mut u8, len: usize, node: usize) -> io::Result<()> {
        if node >= MASK_BITS {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "node id too large"));
        }
        let mut mask = [0u64; MASK_BITS / 64];
        mask[node / 64] |= 1 << (node % 64);
        // SAFETY: ptr/len describe a live mapping owned by the caller; the
        // mask outlives the call.
        let rc = unsafe {
            libc::syscall(
                libc::SYS_mbind,
                ptr as libc::c_long,
                len as libc::c_ulong,
                MPOL_BIND,
                mask.as_ptr(),
                (MASK_BITS + 1) as libc::c_ulong,
                0 as libc::c_uint,
            )
        };
        if rc == 0 {
            Ok(())
        } else {
            Err(io::Error::last_os_error())
        }
    }

    pub fn memory_node_of(ptr: *const u8) -> io::Result<usize> {
        let mut node: libc::c_int = -1;
        // SAFETY: get_mempolicy writes a single int; the address is only
        // inspected by the kernel.
        let rc = unsafe {
            libc::syscall(
                libc::SYS_get_mempolicy,
                &mut node as *mut libc::c_int,
                std::ptr::null_mut::<libc::c_ulong>(),
                0 as libc::c_ulong,
                ptr as libc::c_long,
                MPOL_F_NODE | MPOL_F_ADDR,
            )
        };
        if rc == 0 && node >= 0 {
            Ok(node as usize)
        } else {
            Err(io::Error::last_os_error())
        }
    }

    pub fn pin_current_thread(core: usize) -> io::Result<()> {
        // SAFETY: cpu_set_t is plain data; zeroed is a valid empty set.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(core, &mut set);
            if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0 {
                Ok(())
            } else {
                Err(io::Error::last_os_error())
            }
        }
    }

    pub fn current_affinity() -> io::Result<Vec<usize>> {
        // SAFETY: as above.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
                return Err(io::Error::last_os_error());
            }
            Ok((0..libc::CPU_SETSIZE as usize)
                .filter(|&c| libc::CPU_ISSET(c, &set))
                .collect())
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod sys {
    use std::io;

    fn unsupported() -> io::Error {
        io::Error::new(io::ErrorKind::Unsupported, "NUMA control requires Linux")
    }

    pub fn bind_memory(_: *mut u8, _: usize, _: usize) -> io::Result<()> {
        Err(unsupported())
    }

    pub fn memory_node_of(_: *const u8) -> io::Result<usize> {
        Err(unsupported())
    }

    pub fn pin_current_thread(_: usize) -> io::Result<()> {
        Err(unsupported())
    }

    pub fn current_affinity() -> io::Result<Vec<usize>> {
        Err(unsupported())
    }
}

/// Binds `[ptr, ptr + len)` to `node` with a strict bind policy.
pub fn bind_memory(ptr: *mut u8, len: usize, node: usize) -> io::Result<()> {
    sys::bind_memory(ptr, len, node)
}

/// Node currently backing the page at `ptr`. The page must be faulted in.
pub fn memory_node_of(ptr: *const u8) -> io::Result<usize> {
    sys::memory_node_of(ptr)
}

pub fn pin_current_thread(core: usize) -> io::Result<()> {
    sys::pin_current_thread(core)
}

pub fn current_affinity() -> io::Result<Vec<usize>> {
    sys::current_affinity()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cpulist_parsing() {
        assert_eq!(parse_cpulist("0"), Some(vec![0]));
        assert_eq!(parse_cpulist("0-3,8,10-11\n"), Some(vec![0, 1, 2, 3, 8, 10, 11]));
        assert_eq!(parse_cpulist(""), Some(vec![]));
        assert_eq!(parse_cpulist("3-1"), None);
        assert_eq!(parse_cpulist("x"), None);
    }

    #[test]
    fn fallback_topology_is_nonempty() {
        let nodes = nodes_or_single();
        assert!(!nodes.is_empty());
    }
}
