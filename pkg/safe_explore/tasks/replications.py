import time
from typing import Any, Dict

from celery import Celery
from celery.utils.log import get_task_logger

from safe_explore.config import settings
from safe_explore.exp_harness import replicate

logger = get_task_logger(__name__)

# Initialize Celery app
celery_app = Celery(
    "safe_explore",
    broker=settings.celery_broker_url,
    backend=settings.celery_result_backend,
    include=["safe_explore.tasks.replications"],
)

celery_app.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    timezone="UTC",
    enable_utc=True,
    task_track_started=True,
    task_time_limit=settings.replication_time_limit,
    worker_prefetch_multiplier=1,
    task_acks_late=True,
)


@celery_app.task(bind=True, name="run_replication")
def run_replication(self, experiment: str, payload: Dict[str, Any], run_index: int) -> Dict[str, Any]:
    """
    Celery task running one seeded replication.

    Args:
        experiment: ExperimentKind value
        payload: {"config": ExperimentConfig as JSON, "extras": {...}}
        run_index: Replication index; selects the seed stream

    Returns:
        Replication rows as a JSON-able dictionary
    """
    start_time = time.time()
    if not self.request.is_eager:
        self.update_state(state="RUNNING", meta={"experiment": experiment, "run": run_index})
    result = replicate(experiment, payload, run_index)
    logger.info("%s replication %d done in %.2fs", experiment, run_index, time.time() - start_time)
    return result
