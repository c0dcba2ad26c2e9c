from django.apps import AppConfig


class FlowgenConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'flowgen'
