//! POSIX named shared memory.
//!
//! A channel name `foo` maps to the OS object `/cosim.foo`. The creator
//! holds an exclusive `flock` on its descriptor for as long as it lives; the
//! kernel drops the lock when the process dies, which is how a later creator
//! tells a stale segment from a live one. The creator unlinks the name when it
//! closes; attached peers keep their mapping until they unmap.

use std::ffi::CString;
use std::io;
use std::os::unix::io::RawFd;
use std::ptr::{self, NonNull};
use std::sync::atomic::AtomicU32;

use super::BridgeError;

pub const NAME_MAX_LEN: usize = 128;
const OS_PREFIX: &str = "/cosim.";

pub fn check_name(name: &str) -> Result<(), BridgeError> {
    let ok = !name.is_empty()
        && name.len() <= NAME_MAX_LEN
        && name.bytes().all(|c| c.is_ascii_alphanumeric() || matches!(c, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(BridgeError::InvalidName(name.to_owned()))
    }
}

pub fn os_name(name: &str) -> String {
    format!("{OS_PREFIX}{name}")
}

fn c_name(name: &str) -> Result<CString, BridgeError> {
    check_name(name)?;
    Ok(CString::new(os_name(name)).expect("validated names have no NUL"))
}

fn os_err(op: &'static str) -> BridgeError {
    BridgeError::Os {
        op,
        source: io::Error::last_os_error(),
    }
}

/// A mapped named shared-memory object.
#[derive(Debug)]
pub struct SharedSegment {
    fd: RawFd,
    ptr: NonNull<u8>,
    len: usize,
    c_name: CString,
    owner: bool,
}

// SAFETY: the mapping is process-wide memory; access discipline is the
// channel protocol's job, and a segment is only used from one thread at a time.
unsafe impl Send for SharedSegment {}

pub enum OpenOutcome {
    Ready(SharedSegment),
    /// No object under that name, or the creator has not sized it yet.
    NotYet,
}

impl SharedSegment {
    /// Creates `name` with `len` zeroed bytes. A leftover object whose owner
    /// is gone is unlinked and recreated; a live one is `NameInUse`.
    pub fn create(name: &str, len: usize) -> Result<Self, BridgeError> {
        let cname = c_name(name)?;
        for _ in 0..2 {
            let fd = unsafe {
                libc::shm_open(
                    cname.as_ptr(),
                    libc::O_CREAT | libc::O_EXCL | libc::O_RDWR,
                    (libc::S_IRUSR | libc::S_IWUSR) as libc::mode_t,
                )
            };
            if fd >= 0 {
                return Self::init_owned(fd, cname, len);
            }
            let err = io::Error::last_os_error();
            if err.raw_os_error() != Some(libc::EEXIST) {
                return Err(BridgeError::Os {
                    op: "shm_open(create)",
                    source: err,
                });
            }
            if !reclaim_if_stale(&cname)? {
                return Err(BridgeError::NameInUse(name.to_owned()));
            }
        }
        Err(BridgeError::NameInUse(name.to_owned()))
    }

    fn init_owned(fd: RawFd, c_name: CString, len: usize) -> Result<Self, BridgeError> {
        let fail = |op| {
            let e = os_err(op);
            unsafe {
                libc::close(fd);
                libc::shm_unlink(c_name.as_ptr());
            }
            e
        };
        if unsafe { libc::flock(fd, libc::LOCK_EX | libc::LOCK_NB) } != 0 {
            return Err(fail("flock"));
        }
        if unsafe { libc::ftruncate(fd, len as libc::off_t) } != 0 {
            return Err(fail("ftruncate"));
        }
        match map(fd, len) {
            Ok(ptr) => Ok(Self {
                fd,
                ptr,
                len,
                c_name,
                owner: true,
            }),
            Err(_) => Err(fail("mmap")),
        }
    }

    /// Attaches to an existing object, mapping its full current size.
    pub fn open(name: &str) -> Result<OpenOutcome, BridgeError> {
        let cname = c_name(name)?;
        let fd = unsafe { libc::shm_open(cname.as_ptr(), libc::O_RDWR, 0) };
        if fd < 0 {
            let err = io::Error::last_os_error();
            return if err.raw_os_error() == Some(libc::ENOENT) {
                Ok(OpenOutcome::NotYet)
            } else {
                Err(BridgeError::Os {
                    op: "shm_open(open)",
                    source: err,
                })
            };
        }
        let len = match file_len(fd) {
            Ok(l) => l,
            Err(e) => {
                unsafe { libc::close(fd) };
                return Err(e);
            }
        };
        if len < super::layout::HEADER_LEN {
            unsafe { libc::close(fd) };
            return Ok(OpenOutcome::NotYet);
        }
        match map(fd, len) {
            Ok(ptr) => Ok(OpenOutcome::Ready(Self {
                fd,
                ptr,
                len,
                c_name: cname,
                owner: false,
            })),
            Err(e) => {
                unsafe { libc::close(fd) };
                Err(e)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_owner(&self) -> bool {
        self.owner
    }

    /// 32-bit atomic view of an aligned header word.
    pub fn atomic_u32(&self, offset: usize) -> &AtomicU32 {
        assert!(offset.is_multiple_of(4) && offset + 4 <= self.len);
        // SAFETY: in bounds, 4-aligned (mmap is page aligned), lives as long as &self.
        unsafe { &*(self.ptr.as_ptr().add(offset) as *const AtomicU32) }
    }

    pub fn read_bytes(&self, offset: usize, out: &mut [u8]) {
        assert!(offset + out.len() <= self.len);
        unsafe { ptr::copy_nonoverlapping(self.ptr.as_ptr().add(offset), out.as_mut_ptr(), out.len()) }
    }

    pub fn write_bytes(&mut self, offset: usize, data: &[u8]) {
        assert!(offset + data.len() <= self.len);
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), self.ptr.as_ptr().add(offset), data.len()) }
    }

    pub fn read_u32(&self, offset: usize) -> u32 {
        let mut b = [0u8; 4];
        self.read_bytes(offset, &mut b);
        u32::from_le_bytes(b)
    }

    pub fn write_u32(&mut self, offset: usize, v: u32) {
        self.write_bytes(offset, &v.to_le_bytes());
    }

    pub fn read_f64(&self, offset: usize) -> f64 {
        let mut b = [0u8; 8];
        self.read_bytes(offset, &mut b);
        f64::from_le_bytes(b)
    }

    pub fn write_f64(&mut self, offset: usize, v: f64) {
        self.write_bytes(offset, &v.to_le_bytes());
    }

    pub fn read_f64s(&self, offset: usize, out: &mut [f64]) {
        assert!(offset + 8 * out.len() <= self.len);
        for (i, v) in out.iter_mut().enumerate() {
            *v = self.read_f64(offset + 8 * i);
        }
    }

    pub fn write_f64s(&mut self, offset: usize, values: &[f64]) {
        assert!(offset + 8 * values.len() <= self.len);
        for (i, v) in values.iter().enumerate() {
            self.write_f64(offset + 8 * i, *v);
        }
    }

    /// Copy of the whole mapped region.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len];
        self.read_bytes(0, &mut out);
        out
    }
}

impl Drop for SharedSegment {
    fn drop(&mut self) {
        unsafe {
            libc::munmap(self.ptr.as_ptr().cast(), self.len);
            if self.owner {
                libc::shm_unlink(self.c_name.as_ptr());
            }
            libc::close(self.fd);
        }
    }
}

fn map(fd: RawFd, len: usize) -> Result<NonNull<u8>, BridgeError> {
    let p = unsafe {
        libc::mmap(
            ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_SHARED,
            fd,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        return Err(os_err("mmap"));
    }
    Ok(NonNull::new(p.cast()).expect("mmap never returns null on success"))
}

fn file_len(fd: RawFd) -> Result<usize, BridgeError> {
    let mut st: libc::stat = unsafe { std::mem::zeroed() };
    if unsafe { libc::fstat(fd, &mut st) } != 0 {
        return Err(os_err("fstat"));
    }
    Ok(st.st_size as usize)
}

/// Returns true if the existing object had no live owner and was unlinked.
fn reclaim_if_stale(cname: &CString) -> Result<bool, BridgeError> {
    let fd = unsafe { libc::shm_open(cname.as_ptr(), libc::O_RDWR, 0) };
    if fd < 0 {
        // vanished between our create and open: treat as reclaimable
        return Ok(io::Error::last_os_error().raw_os_error() == Some(libc::ENOENT));
    }
    let locked = unsafe { libc::flock(fd, libc::LOCK_EX | libc::LOCK_NB) } == 0;
    if locked {
        unsafe {
            libc::shm_unlink(cname.as_ptr());
            libc::flock(fd, libc::LOCK_UN);
        }
    }
    unsafe { libc::close(fd) };
    Ok(locked)
}

/// Removes a leftover object by name, live or not. For test cleanup.
pub fn force_unlink(name: &str) -> Result<(), BridgeError> {
    let cname = c_name(name)?;
    unsafe { libc::shm_unlink(cname.as_ptr()) };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unique(tag: &str) -> String {
        format!("seg-{tag}-{}", std::process::id())
    }

    #[test]
    fn names() {
        assert!(check_name("cosim.test").is_ok());
        assert!(check_name("a_b-C.9").is_ok());
        assert!(check_name("").is_err());
        assert!(check_name("has/slash").is_err());
        assert!(check_name("space here").is_err());
        assert!(check_name(&"x".repeat(129)).is_err());
        assert!(check_name(&"x".repeat(128)).is_ok());
    }

    #[test]
    fn create_zeroed_and_visible_to_opener() {
        let name = unique("zero");
        let mut a = SharedSegment::create(&name, 64).unwrap();
        assert!(a.snapshot().iter().all(|b| *b == 0));
        a.write_u32(4, 77);
        let b = match SharedSegment::open(&name).unwrap() {
            OpenOutcome::Ready(s) => s,
            OpenOutcome::NotYet => panic!("segment should exist"),
        };
        assert_eq!(b.len(), 64);
        assert_eq!(b.read_u32(4), 77);
    }

    #[test]
    fn live_owner_blocks_second_create() {
        let name = unique("live");
        let _a = SharedSegment::create(&name, 64).unwrap();
        assert!(matches!(SharedSegment::create(&name, 64), Err(BridgeError::NameInUse(_))));
    }

    #[test]
    fn stale_object_is_reclaimed() {
        let name = unique("stale");
        // leftover with no lock holder, as after a crash
        let cname = c_name(&name).unwrap();
        unsafe {
            let fd = libc::shm_open(cname.as_ptr(), libc::O_CREAT | libc::O_RDWR, 0o600);
            assert!(fd >= 0);
            libc::ftruncate(fd, 16);
            libc::close(fd);
        }
        let seg = SharedSegment::create(&name, 64).unwrap();
        assert_eq!(seg.len(), 64);
    }

    #[test]
    fn owner_drop_unlinks() {
        let name = unique("unlink");
        drop(SharedSegment::create(&name, 64).unwrap());
        assert!(matches!(SharedSegment::open(&name).unwrap(), OpenOutcome::NotYet));
    }
}
