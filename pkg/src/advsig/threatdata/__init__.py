"""Speaker corpora, threat-dataset generation and the manifest format."""

from .corpus import (
    PCM_MAX,
    PCM_SCALE,
    Utterance,
    corpus_checksum,
    ingest_corpus,
    load_corpus,
    read_wav,
    save_corpus,
    split_per_speaker,
    synth_corpus,
    victim_splits,
    write_wav,
)
from .generate import (
    AttackEntry,
    Recipe,
    generate_threat_dataset,
    multi_vm_recipe,
    quantize_delta,
    single_vm_recipe,
    threat_splits,
)
from .manifest import (
    ThreatManifest,
    ThreatRecord,
    count_records,
    load_manifest,
    validate_manifest,
    write_manifest,
)
