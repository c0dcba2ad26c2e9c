from django.apps import AppConfig


class TensorgradConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'tensorgrad'
