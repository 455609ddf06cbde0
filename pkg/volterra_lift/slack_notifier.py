import logging

import requests

from .settings import get_setting

logger = logging.getLogger(__name__)


def send_slack_message(message):
    """Send a simple text notification to Slack."""
    webhook = get_setting("SLACK_WEBHOOK_URL")
    if not webhook:
        return False
    payload = {"text": message}
    try:
        requests.post(webhook, json=payload, timeout=10).raise_for_status()
    except requests.RequestException as exc:
        logger.debug("slack notification failed: %s", exc)
        return False
    return True
