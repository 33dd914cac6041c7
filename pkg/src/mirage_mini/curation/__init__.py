from .captions import CAPTION_FIELDS, CaptionGateway, CaptionRecord, TemplateCaptioner, assemble_caption
from .filters import (
    KEEP,
    REJECT,
    overlay_verdict,
    screen_split_verdict,
    static_frame_verdict,
    sync_verdict,
    text_area_verdict,
    union_area,
)
from .pipeline import (
    INPUT_STAGE,
    STAGES,
    CurationRecord,
    FunnelReport,
    MissingFeatureError,
    Thresholds,
    read_records,
    run_pipeline,
    stage_verdict,
    write_records,
)
from .scenes import SceneRange, chunk_scene, extract_single_speaker_scenes, sample_training_segment
from .tasks import FileTaskStore, MemoryTaskStore, StoreUnavailableError, acquire_task, store_result
