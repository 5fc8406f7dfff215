from kernelloop.loop.engine import (KEEP_THRESHOLD, LoopResult, LoopState, MoveOnCriteria, keep_decision,
                                   run_loop, should_move_on, t_best_trace)
from kernelloop.loop.mutators import (ExternalMutator, Mutator, PlaybookMutator, Proposal, RandomMutator,
                                      ScriptedMutator, make_mutator)
from kernelloop.loop.store import GitStore, MemoryStore, VersionStore, make_store

__all__ = [
    "KEEP_THRESHOLD", "LoopResult", "LoopState", "MoveOnCriteria", "keep_decision", "run_loop",
    "should_move_on", "t_best_trace", "ExternalMutator", "Mutator", "PlaybookMutator", "Proposal",
    "RandomMutator", "ScriptedMutator", "make_mutator", "GitStore", "MemoryStore", "VersionStore",
    "make_store",
]
