"""Workspace version stores: git (default) and an in-memory snapshot fallback."""

from __future__ import annotations

import shutil
import subprocess
from pathlib import Path
from typing import Protocol

from kernelloop.errors import StoreError

_GIT_IDENTITY = ["-c", "user.name=kernelloop", "-c", "user.email=kernelloop@localhost",
                 "-c", "commit.gpgsign=false"]


class VersionStore(Protocol):
    def ensure_baseline(self) -> None:
        """Make sure the current workspace state is committed as the starting revision."""

    def check_only_changed(self, filename: str) -> None:
        """Raise StoreError if anything but ``filename`` differs from the head revision."""

    def commit(self, message: str) -> None:
        ...

    def revert_last(self) -> None:
        """Drop the head revision and restore the working files to its parent."""

    def messages(self) -> list[str]:
        """Commit messages, oldest first."""

    def head_text(self, filename: str) -> str:
        ...


class GitStore:
    """Drives the ``git`` command line inside the workspace directory."""

    def __init__(self, root: str | Path, tracked: tuple[str, ...] = ("spec.cfg", "candidate.cfg", ".gitignore")):
        self.root = Path(root)
        self.tracked = tracked
        if shutil.which("git") is None:
            raise StoreError("git is not installed; use the memory store")

    def _git(self, *args: str) -> str:
        proc = subprocess.run(["git", *_GIT_IDENTITY, *args], cwd=self.root, capture_output=True, text=True)
        if proc.returncode != 0:
            raise StoreError(f"git {' '.join(args)} failed: {proc.stderr.strip() or proc.stdout.strip()}")
        return proc.stdout

    def _has_repo(self) -> bool:
        return (self.root / ".git").exists()

    def ensure_baseline(self) -> None:
        if not self._has_repo():
            self._git("init", "-q")
            self._git("add", "--", *[t for t in self.tracked if (self.root / t).exists()])
            self._git("commit", "-q", "-m", "baseline")
            return
        if self._git("status", "--porcelain").strip():
            raise StoreError(f"{self.root} has uncommitted changes; commit or reset before looping")

    def check_only_changed(self, filename: str) -> None:
        changed = []
        for line in self._git("status", "--porcelain", "--untracked-files=all").splitlines():
            path = line[3:].strip().strip('"')
            if path != filename:
                changed.append(path)
        if changed:
            raise StoreError(f"only {filename} may change between revisions; also changed: {', '.join(changed)}")

    def commit(self, message: str) -> None:
        self._git("add", "--", *self.tracked_existing())
        self._git("commit", "-q", "--allow-empty", "-m", message)

    def tracked_existing(self) -> list[str]:
        return [t for t in self.tracked if (self.root / t).exists()]

    def revert_last(self) -> None:
        self._git("reset", "-q", "--hard", "HEAD~1")

    def messages(self) -> list[str]:
        out = self._git("log", "--reverse", "--format=%s")
        return [line for line in out.splitlines() if line]

    def head_text(self, filename: str) -> str:
        return self._git("show", f"HEAD:{filename}")


class MemoryStore:
    """Copy-on-write snapshots of the tracked files, for machines without git."""

    def __init__(self, root: str | Path, tracked: tuple[str, ...] = ("spec.cfg", "candidate.cfg", ".gitignore")):
        self.root = Path(root)
        self.tracked = tracked
        self._revs: list[tuple[str, dict[str, bytes]]] = []

    def _snapshot(self) -> dict[str, bytes]:
        return {t: (self.root / t).read_bytes() for t in self.tracked if (self.root / t).exists()}

    def ensure_baseline(self) -> None:
        if not self._revs:
            self._revs.append(("baseline", self._snapshot()))

    def check_only_changed(self, filename: str) -> None:
        head = self._revs[-1][1]
        now = self._snapshot()
        changed = sorted(k for k in set(head) | set(now) if head.get(k) != now.get(k) and k != filename)
        if changed:
            raise StoreError(f"only {filename} may change between revisions; also changed: {', '.join(changed)}")

    def commit(self, message: str) -> None:
        self._revs.append((message, self._snapshot()))

    def revert_last(self) -> None:
        if len(self._revs) < 2:
            raise StoreError("nothing to revert")
        self._revs.pop()
        for name, data in self._revs[-1][1].items():
            (self.root / name).write_bytes(data)

    def messages(self) -> list[str]:
        return [m for m, _ in self._revs]

    def head_text(self, filename: str) -> str:
        return self._revs[-1][1][filename].decode()


def make_store(kind: str, root: str | Path) -> VersionStore:
    if kind == "git":
        return GitStore(root)
    if kind == "memory":
        return MemoryStore(root)
    raise StoreError(f"unknown store {kind!r} (git or memory)")
