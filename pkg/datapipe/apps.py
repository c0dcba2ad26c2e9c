from django.apps import AppConfig


class DatapipeConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'datapipe'
